//! Selection rules against exhaustive scans.

use bachkit_core::mask::{select_mask_layers, select_tau_mask};
use bachkit_core::matching::{select_match_layers, select_tau_match};
use bachkit_core::select::AnalysisGrid;
use bachkit_core::vital::{select_vital_layers, LayerReport};
use proptest::prelude::*;

/// Best `k`-subset by total score; among equal totals the lexicographically
/// smallest index list. Scores are small integers so totals compare exactly.
fn best_subset(scores: &[f64], k: usize, higher: bool) -> Vec<usize> {
    let n = scores.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != k {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
        let total: f64 = set.iter().map(|&i| scores[i]).sum();
        let total = if higher { total } else { -total };
        let better = match &best {
            None => true,
            Some((b, s)) => total > *b || (total == *b && set < *s),
        };
        if better {
            best = Some((total, set));
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}

/// First index meeting the predicate, scanning left to right.
fn first(curve: &[f64], pred: impl Fn(f64) -> bool) -> Option<usize> {
    (0..curve.len()).find(|&i| pred(curve[i]))
}

fn curve() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..20, 1..30)
        .prop_map(|v| v.into_iter().map(|x| f64::from(x) / 19.0).collect())
}

/// A grid whose layer means are multiples of 1/steps, so ties are real.
fn grid() -> impl Strategy<Value = (AnalysisGrid, usize)> {
    (1usize..6, 1usize..10).prop_flat_map(|(steps, depth)| {
        (prop::collection::vec(0u8..4, steps * depth), 0..=depth).prop_map(move |(v, k)| {
            let values = v.into_iter().map(f64::from).collect();
            (
                AnalysisGrid::new(steps, depth, "metric", values).unwrap(),
                k,
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tau_mask_is_first_step_above_95_percent(c in curve()) {
        let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let want = first(&c, |v| v > 0.95 * max).or_else(|| first(&c, |v| v == max)).unwrap();
        prop_assert_eq!(select_tau_mask(&c).unwrap(), want);
    }

    #[test]
    fn tau_match_is_first_step_within_105_percent(c in curve()) {
        let min = c.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(select_tau_match(&c).unwrap(), first(&c, |v| v <= 1.05 * min).unwrap());
    }

    #[test]
    fn mask_layers_maximise_mean_iou((g, k) in grid()) {
        let means: Vec<f64> = (0..g.depth).map(|l| (0..g.steps).map(|s| g.get(s, l)).sum()).collect();
        prop_assert_eq!(select_mask_layers(&g, k).unwrap(), best_subset(&means, k, true));
    }

    #[test]
    fn match_layers_minimise_mean_mse((g, k) in grid()) {
        let means: Vec<f64> = (0..g.depth).map(|l| (0..g.steps).map(|s| g.get(s, l)).sum()).collect();
        prop_assert_eq!(select_match_layers(&g, k).unwrap(), best_subset(&means, k, false));
    }

    #[test]
    fn vital_layers_maximise_drop(
        skip in prop::collection::vec(0u8..6, 1..12),
        baseline in 0u8..6,
        k_frac in 0.0f64..=1.0,
    ) {
        let scores: Vec<f64> = skip.iter().map(|&s| f64::from(s)).collect();
        let k = (k_frac * scores.len() as f64) as usize;
        let report = LayerReport::new(f64::from(baseline), scores.clone()).unwrap();
        let drops: Vec<f64> = scores.iter().map(|s| f64::from(baseline) - s).collect();
        prop_assert_eq!(select_vital_layers(&report, k).unwrap(), best_subset(&drops, k, true));
    }
}

#[test]
fn k_beyond_depth_is_rejected() {
    let g = AnalysisGrid::new(1, 3, "iou", vec![0.0; 3]).unwrap();
    assert!(select_mask_layers(&g, 4).is_err());
    assert!(select_tau_mask(&[]).is_err());
    assert!(select_tau_match(&[]).is_err());
}
