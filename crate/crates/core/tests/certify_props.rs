mod common;

use common::*;
use patchcert::attack::{apply_patch, Location, PatchTensor};
use patchcert::sin::InputRegion;
use patchcert::windows::{filter_windows, generate_windows, global_plan, merge_windows};
use patchcert::{Certifier, DefenseConfig, DetectionOutcome, Window};
use proptest::prelude::*;
use rand::Rng;

fn config(r: &mut rand_chacha::ChaCha8Rng) -> DefenseConfig {
    DefenseConfig {
        winner_rate: r.gen_range(0.05f32..0.4),
        patch: r.gen_range(1..=3),
        step: r.gen_range(1..=3),
        tau: r.gen_range(0.2..=1.0),
        alert_cluster_min: r.gen_range(1..=3),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn cached_sweep_equals_honest_occlusion(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(7..=12), r.gen_range(7..=12));
        let model = tiny_model(&mut r, 2, h, w, 3);
        let cert = Certifier::new(&model, config(&mut r)).unwrap();
        let x = random_image(&mut r, 2, h, w);
        let map = cert.occlusion_map(&x).unwrap();
        let (base, _, region) = cert.pruned_predict(&x).unwrap();
        prop_assert_eq!(map.base_label, base);
        let expected: Vec<Window> = cert.plan().candidates(&region);
        prop_assert_eq!(map.entries.iter().map(|e| e.0).collect::<Vec<_>>(), expected);
        for (win, label) in &map.entries {
            prop_assert_eq!(*label, cert.occluded_predict(&x, win).unwrap());
        }
    }

    #[test]
    fn certify_agrees_with_exhaustive_search_without_merging(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(7..=11), r.gen_range(7..=11));
        let model = tiny_model(&mut r, 1, h, w, 2);
        let cfg = DefenseConfig { tau: 1.0, ..config(&mut r) };
        let cert = Certifier::new(&model, cfg).unwrap();
        let x = random_image(&mut r, 1, h, w);
        let y = r.gen_range(0..2);
        let fast = cert.certify(&x, y).unwrap();
        let slow = cert.certify_oracle(&x, y).unwrap();
        prop_assert_eq!(fast.certified, slow.certified);
        prop_assert_eq!(fast.pruned_label, slow.pruned_label);
        if fast.certified {
            prop_assert!(fast.evaluated_count <= slow.evaluated_count);
        }
    }

    #[test]
    fn certified_images_are_never_silently_wrong(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(7..=10), r.gen_range(7..=10));
        let model = tiny_model(&mut r, 1, h, w, 2);
        let cfg = config(&mut r);
        let cert = Certifier::new(&model, cfg).unwrap();
        let x = random_image(&mut r, 1, h, w);
        let y = cert.pruned_predict(&x).unwrap().0;
        if cert.certify(&x, y).unwrap().certified {
            for trial in 0..6u64 {
                let patch = match trial % 3 {
                    0 => PatchTensor::filled(1, cfg.patch, 1.0).unwrap(),
                    1 => PatchTensor::filled(1, cfg.patch, 0.0).unwrap(),
                    _ => PatchTensor::random(1, cfg.patch, seed ^ trial).unwrap(),
                };
                let loc = Location { x: r.gen_range(0..=w - cfg.patch), y: r.gen_range(0..=h - cfg.patch) };
                let out = cert.detect(&apply_patch(&x, &patch, loc).unwrap()).unwrap();
                if let DetectionOutcome::Benign { label } = out {
                    prop_assert_eq!(label, y, "silent error at {:?}", loc);
                }
            }
        }
    }

    #[test]
    fn certification_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = tiny_model(&mut r, 2, 9, 9, 3);
        let cert = Certifier::new(&model, config(&mut r)).unwrap();
        let x = random_image(&mut r, 2, 9, 9);
        prop_assert_eq!(cert.certify(&x, 1).unwrap(), cert.certify(&x, 1).unwrap());
        prop_assert_eq!(cert.detect(&x).unwrap(), cert.detect(&x).unwrap());
    }

    #[test]
    fn merged_count_does_not_fall_as_tau_rises(h in 6usize..24, w in 6usize..24, patch in 1usize..4, step in 1usize..4) {
        prop_assume!(patch + step - 1 <= h.min(w));
        let counts: Vec<usize> = [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0]
            .iter()
            .map(|&t| global_plan(h, w, patch, step, t).unwrap().merged.len())
            .collect();
        prop_assert!(counts.windows(2).all(|c| c[0] <= c[1]), "{:?}", counts);
    }

    #[test]
    fn merging_is_a_fixed_point(seed in any::<u64>(), tau in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(5..16), r.gen_range(5..16));
        let all = generate_windows(h, w, 2, 2).unwrap();
        let subset: Vec<Window> = all.into_iter().filter(|_| r.gen_bool(0.5)).collect();
        prop_assume!(!subset.is_empty());
        let plan = merge_windows(&subset, tau).unwrap();
        let again = merge_windows(&plan.merged, tau).unwrap();
        prop_assert_eq!(&again.merged, &plan.merged);
        prop_assert!(subset.iter().all(|s| plan.merged.iter().any(|m| m.contains(s))));
    }

    #[test]
    fn filter_matches_pixel_scan(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(4..14), r.gen_range(4..14));
        let grid: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.05)).collect();
        let region = InputRegion::from_grid(h, w, grid.clone());
        let windows = generate_windows(h, w, r.gen_range(1..3), r.gen_range(1..3)).unwrap();
        let want: Vec<Window> = windows
            .iter()
            .copied()
            .filter(|win| (win.y..win.y + win.height).any(|y| (win.x..win.x + win.width).any(|x| grid[y * w + x])))
            .collect();
        prop_assert_eq!(filter_windows(&windows, &region), want);
    }
}
