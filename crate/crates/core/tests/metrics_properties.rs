use fmtrack_core::metrics::{average_jaccard, delta_avg, delta_avg_at, occlusion_accuracy, EvalTrack};
use fmtrack_core::tensor::Point;
use proptest::prelude::*;

fn track_strategy() -> impl Strategy<Value = EvalTrack> {
    (2usize..8)
        .prop_flat_map(|t| {
            (
                prop::collection::vec((0.0..256.0f64, 0.0..256.0f64, any::<bool>()), t),
                prop::collection::vec((-30.0..30.0f64, -30.0..30.0f64, any::<bool>()), t),
                0..t - 1,
            )
        })
        .prop_map(|(gt, off, q)| {
            let mut gt_visible: Vec<bool> = gt.iter().map(|g| g.2).collect();
            gt_visible[q] = true;
            EvalTrack {
                gt_points: gt.iter().map(|g| Point::new(g.0, g.1)).collect(),
                gt_visible,
                pred_points: gt.iter().zip(&off).map(|(g, o)| Point::new(g.0 + o.0, g.1 + o.1)).collect(),
                pred_visible: off.iter().map(|o| o.2).collect(),
                query_index: q,
            }
        })
}

proptest! {
    #[test]
    fn metrics_lie_in_unit_interval(tracks in prop::collection::vec(track_strategy(), 1..4)) {
        if let Ok((d, per)) = delta_avg(&tracks) {
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(per.windows(2).all(|w| w[0] <= w[1]));
        }
        let (aj, _) = average_jaccard(&tracks).unwrap();
        prop_assert!((0.0..=1.0).contains(&aj));
        let oa = occlusion_accuracy(&tracks).unwrap();
        prop_assert!((0.0..=1.0).contains(&oa));
    }

    #[test]
    fn perfect_predictions_score_one(tracks in prop::collection::vec(track_strategy(), 1..4)) {
        let perfect: Vec<EvalTrack> = tracks
            .into_iter()
            .map(|t| EvalTrack { pred_points: t.gt_points.clone(), pred_visible: t.gt_visible.clone(), ..t })
            .collect();
        if let Ok((d, _)) = delta_avg(&perfect) {
            prop_assert_eq!(d, 1.0);
        }
        prop_assert_eq!(average_jaccard(&perfect).unwrap().0, 1.0);
        prop_assert_eq!(occlusion_accuracy(&perfect).unwrap(), 1.0);
    }

    #[test]
    fn huge_threshold_counts_every_visible_point(tracks in prop::collection::vec(track_strategy(), 1..4)) {
        if let Ok((_, per)) = delta_avg_at(&tracks, &[1e9]) {
            prop_assert_eq!(per[0], 1.0);
        }
    }
}
