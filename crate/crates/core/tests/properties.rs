use nalgebra::DMatrix;
use proptest::prelude::*;

use quadric_landmarks::assoc::hungarian;
use quadric_landmarks::bench::metrics::{aggregate, write_metrics_csv, TrialMetrics, TrialResult};

fn brute(cost: &DMatrix<f64>, row: usize, used: u32) -> (usize, f64) {
    if row == cost.nrows() {
        return (0, 0.0);
    }
    let mut best = brute(cost, row + 1, used);
    for c in 0..cost.ncols() {
        if used & (1 << c) == 0 && cost[(row, c)].is_finite() {
            let (k, v) = brute(cost, row + 1, used | (1 << c));
            let cand = (k + 1, v + cost[(row, c)]);
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                best = cand;
            }
        }
    }
    best
}

fn cost_matrix() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| {
        prop::collection::vec(
            prop_oneof![8 => (0u32..30).prop_map(f64::from), 1 => Just(f64::INFINITY)],
            n * m,
        )
        .prop_map(move |v| DMatrix::from_row_slice(n, m, &v))
    })
}

fn result(level: f64, metrics: Option<(f64, f64, f64)>) -> TrialResult {
    TrialResult {
        sweep: "bbox".into(),
        method: "tri+yaw".into(),
        noise_type: "bbox".into(),
        noise_level: level,
        object: 0,
        seed: 0,
        metrics: metrics.map(|(iou2d, e_trans, e_axe)| TrialMetrics { iou2d, e_trans, e_axe }),
        wall_time: 0.0,
    }
}

fn csv(results: &[TrialResult]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(&aggregate(results).unwrap(), &mut buf).unwrap();
    buf
}

proptest! {
    #[test]
    fn hungarian_matches_exhaustive_search(cost in cost_matrix()) {
        let a = hungarian(&cost);
        let total: f64 = a.pairs.iter().map(|&(r, c)| cost[(r, c)]).sum();
        prop_assert_eq!((a.pairs.len(), total), brute(&cost, 0, 0));
        prop_assert_eq!(a.pairs.len() + a.unmatched_rows.len(), cost.nrows());
        prop_assert_eq!(a.pairs.len() + a.unmatched_cols.len(), cost.ncols());
    }

    #[test]
    fn transposing_keeps_the_optimum(cost in cost_matrix()) {
        let a = hungarian(&cost);
        let b = hungarian(&cost.transpose());
        let ta: f64 = a.pairs.iter().map(|&(r, c)| cost[(r, c)]).sum();
        let tb: f64 = b.pairs.iter().map(|&(r, c)| cost[(c, r)]).sum();
        prop_assert_eq!((a.pairs.len(), ta), (b.pairs.len(), tb));
    }

    #[test]
    fn failures_never_move_error_means(
        ok in prop::collection::vec((0.0f64..1.0, 0.0f64..5.0, 0.0f64..5.0), 1..20),
        failed in 1usize..10,
    ) {
        let successes: Vec<TrialResult> = ok.iter().map(|m| result(0.02, Some(*m))).collect();
        let mut all = successes.clone();
        all.extend((0..failed).map(|_| result(0.02, None)));
        let a = &aggregate(&successes).unwrap()[0];
        let b = &aggregate(&all).unwrap()[0];
        prop_assert_eq!((a.iou2d, a.e_trans, a.e_axe), (b.iou2d, b.e_trans, b.e_axe));
        prop_assert_eq!(b.success_rate, ok.len() as f64 / (ok.len() + failed) as f64);
        prop_assert!((0.0..=1.0).contains(&b.success_rate));
    }

    #[test]
    fn identical_results_give_identical_csv(
        ok in prop::collection::vec(prop::option::of((0.0f64..1.0, 0.0f64..5.0, 0.0f64..5.0)), 1..20),
    ) {
        let results: Vec<TrialResult> = ok.iter().enumerate().map(|(i, m)| result((i % 3) as f64 * 0.01, *m)).collect();
        prop_assert_eq!(csv(&results), csv(&results.clone()));
    }
}
