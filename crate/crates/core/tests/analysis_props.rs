use patchcert::analysis::{center_and_deviation, mean_shift, Point};
use proptest::prelude::*;

fn points() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((0.0f64..30.0, 0.0f64..30.0).prop_map(|(x, y)| Point::new(x, y)), 1..40)
}

proptest! {
    #[test]
    fn spread_matches_two_pass_formula(pts in points()) {
        let (c, s) = center_and_deviation(&pts);
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.x).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.y).sum::<f64>() / n;
        let var = pts.iter().map(|p| (p.x - mx).powi(2) + (p.y - my).powi(2)).sum::<f64>() / n;
        prop_assert!((c.x - mx).abs() < 1e-9 && (c.y - my).abs() < 1e-9);
        prop_assert!((s - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn clustering_is_translation_equivariant(pts in points(), dx in -50i32..50, dy in -50i32..50, bw in 1.0f64..8.0) {
        // Integer shifts keep coordinates exactly representable.
        let pts: Vec<Point> = pts.iter().map(|p| Point::new(p.x.round(), p.y.round())).collect();
        let moved: Vec<Point> = pts.iter().map(|p| Point::new(p.x + f64::from(dx), p.y + f64::from(dy))).collect();
        let a = mean_shift(&pts, bw).unwrap();
        let b = mean_shift(&moved, bw).unwrap();
        prop_assert_eq!(a.cluster_count(), b.cluster_count());
        for (ca, cb) in a.clusters.iter().zip(&b.clusters) {
            prop_assert_eq!(&ca.members, &cb.members);
            prop_assert!((ca.deviation - cb.deviation).abs() < 1e-6);
        }
    }

    #[test]
    fn every_point_lands_in_exactly_one_cluster(pts in points(), bw in 0.5f64..10.0) {
        let stats = mean_shift(&pts, bw).unwrap();
        let mut seen: Vec<usize> = stats.clusters.iter().flat_map(|c| c.members.clone()).collect();
        seen.sort();
        prop_assert_eq!(seen, (0..pts.len()).collect::<Vec<_>>());
    }

    #[test]
    fn distant_blobs_separate(cx in 0.0f64..5.0, cy in 0.0f64..5.0, n in 2usize..12, bw in 1.0f64..3.0) {
        let blob = |ox: f64, oy: f64| (0..n).map(move |i| Point::new(ox + (i % 3) as f64 * 0.1 * bw, oy + (i / 3) as f64 * 0.1 * bw));
        let pts: Vec<Point> = blob(cx, cy).chain(blob(cx + 10.0 * bw, cy)).collect();
        let stats = mean_shift(&pts, bw).unwrap();
        prop_assert_eq!(stats.cluster_count(), 2);
        prop_assert_eq!(stats.largest().members.len(), n);
    }
}
