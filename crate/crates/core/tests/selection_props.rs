use std::collections::{BTreeMap, BTreeSet};

use ecp_core::earf::{prune_layer, rank_project, ActiveSet, RankedToken, VisualScore};
use ecp_core::emsf::{retain_topk, token_saliency, SaliencyMap, TokenGridSpec};
use ecp_core::etcs::{preselect, select_keyframes, EtcsParams};
use ecp_core::event::{
    ActivityProfile, DensityFilterParams, Event, EventStream, Polarity, WindowingParams,
};
use proptest::prelude::*;

fn profile(flux: Vec<u64>) -> ActivityProfile {
    ActivityProfile::from_flux(flux, WindowingParams::new(1_000, 0).unwrap())
}

fn frame_times(n_windows: usize, per_window: u64) -> Vec<u64> {
    let step = 1_000 / per_window;
    (0..n_windows as u64 * per_window)
        .map(|k| k * step + 3)
        .collect()
}

proptest! {
    #[test]
    fn keyframe_count_is_budget_or_window_count(
        flux in proptest::collection::vec(0u64..50, 1..40),
        n_target in 1usize..20,
        share in 0.0f64..=1.0,
        min_gap in 0usize..4,
        q in 0.0f64..=1.0,
        per_window in 1u64..4,
    ) {
        let p = profile(flux);
        let params = EtcsParams { n_target, delta_share: share, min_gap, low_activity_quantile: q };
        let ks = select_keyframes(&p, &params, &frame_times(p.len(), per_window)).unwrap();
        prop_assert_eq!(ks.len(), n_target.min(p.len()));
        let frames = ks.frame_indices();
        prop_assert!(frames.windows(2).all(|w| w[0] < w[1]));
        let windows: BTreeSet<usize> = ks.window_indices().into_iter().collect();
        prop_assert_eq!(windows.len(), ks.len());
    }

    #[test]
    fn largest_changes_are_preselected(
        flux in proptest::collection::vec(0u64..50, 2..40),
        n_target in 1usize..20,
        share in 0.0f64..=1.0,
    ) {
        let p = profile(flux);
        let params = EtcsParams { n_target, delta_share: share, ..EtcsParams::default() };
        let pre: BTreeSet<usize> = preselect(&p, &params).into_iter().collect();
        let n_delta = ((share * n_target as f64).ceil() as usize).min(p.len() - 1);
        // window n ranks by deltas[n-1], larger first, earlier on ties
        let mut by_delta: Vec<usize> = (1..p.len()).collect();
        by_delta.sort_by_key(|&n| (std::cmp::Reverse(p.deltas[n - 1]), n));
        for &n in &by_delta[..n_delta] {
            prop_assert!(pre.contains(&n), "window {n} missing from {pre:?}");
        }
    }

    #[test]
    fn keyframes_are_deterministic(flux in proptest::collection::vec(0u64..50, 1..30), n_target in 1usize..12) {
        let p = profile(flux);
        let params = EtcsParams { n_target, min_gap: 2, ..EtcsParams::default() };
        let times = frame_times(p.len(), 2);
        prop_assert_eq!(select_keyframes(&p, &params, &times).unwrap(), select_keyframes(&p, &params, &times).unwrap());
    }

    #[test]
    fn raising_the_budget_keeps_earlier_frames(
        flux in proptest::collection::vec(0u64..50, 1..40),
        n_target in 1usize..20,
        share in 0.0f64..=1.0,
        per_window in 1u64..4,
    ) {
        let p = profile(flux);
        let times = frame_times(p.len(), per_window);
        let at = |n| {
            let params = EtcsParams { n_target: n, delta_share: share, min_gap: 0, ..EtcsParams::default() };
            select_keyframes(&p, &params, &times).unwrap().frame_indices().into_iter().collect::<BTreeSet<_>>()
        };
        let small = at(n_target);
        let large = at(n_target + 1);
        prop_assert!(small.is_subset(&large), "{small:?} not within {large:?}");
    }

    #[test]
    fn retain_budget_matches_floor_rule(counts in proptest::collection::vec(0u64..30, 1..300), rho in 0.001f64..=1.0) {
        let n = counts.len();
        let map = SaliencyMap::from_counts(0, 1, n, (0, 1), counts).unwrap();
        let r = retain_topk(&map, rho).unwrap();
        let k = ((rho * n as f64 + 1e-9).floor() as usize).max(1);
        prop_assert_eq!(r.budget_k, k);
        prop_assert_eq!(r.indices.len(), k);
        prop_assert!(r.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn retained_set_survives_monotone_count_transforms(
        counts in proptest::collection::vec(0u64..30, 1..64),
        rho in 0.01f64..=1.0,
    ) {
        let n = counts.len();
        let base = retain_topk(&SaliencyMap::from_counts(0, 1, n, (0, 1), counts.clone()).unwrap(), rho).unwrap();
        for f in [|c: u64| 3 * c + 2, |c: u64| c * c, |c: u64| c + 1000] {
            let mapped: Vec<u64> = counts.iter().map(|&c| f(c)).collect();
            let m = SaliencyMap::from_counts(0, 1, n, (0, 1), mapped).unwrap();
            prop_assert_eq!(&retain_topk(&m, rho).unwrap().indices, &base.indices);
        }
    }

    #[test]
    fn saliency_counts_and_range(
        raw in proptest::collection::vec((0u64..10_000, 0u16..40, 0u16..30), 0..300),
        rows in 1usize..8,
        cols in 1usize..10,
        a in 0u64..5_000,
        len in 1u64..6_000,
    ) {
        let events = raw.into_iter().map(|(t, x, y)| Event::new(t, x, y, Polarity::Positive)).collect();
        let s = EventStream::new(events, 40, 30).unwrap();
        let grid = TokenGridSpec::new(rows, cols, 40, 30).unwrap();
        let m = token_saliency(&s, &grid, (a, a + len), &DensityFilterParams::identity(), 0).unwrap();
        let in_window = s.events().iter().filter(|e| e.t >= a && e.t < a + len).count() as u64;
        prop_assert_eq!(m.counts.iter().sum::<u64>(), in_window);
        prop_assert!(m.saliency.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (lo, hi) = (*m.counts.iter().min().unwrap(), *m.counts.iter().max().unwrap());
        if hi > lo {
            for (c, v) in m.counts.iter().zip(&m.saliency) {
                if *c == lo { prop_assert_eq!(*v, 0.0); }
                if *c == hi { prop_assert_eq!(*v, 1.0); }
            }
        }
    }

    #[test]
    fn token_grid_tiles_the_sensor(w in 1u16..80, h in 1u16..60, rows in 1usize..12, cols in 1usize..18) {
        prop_assume!(cols <= w as usize && rows <= h as usize);
        let g = TokenGridSpec::new(rows, cols, w, h).unwrap();
        let mut hits = vec![0usize; g.n_tokens()];
        for y in 0..h {
            for x in 0..w {
                hits[g.token_of(x, y)] += 1;
            }
        }
        prop_assert!(hits.iter().all(|&c| c > 0));
        prop_assert_eq!(hits.iter().sum::<usize>(), w as usize * h as usize);
    }

    #[test]
    fn rank_projection_is_a_grid_permutation(values in proptest::collection::vec(-5i32..5, 2..50)) {
        let v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
        let r = rank_project(&v);
        let d = (v.len() - 1) as f64;
        let mut scaled: Vec<usize> = r.iter().map(|x| (x * d).round() as usize).collect();
        scaled.sort_unstable();
        prop_assert_eq!(scaled, (0..v.len()).collect::<Vec<_>>());
    }

    #[test]
    fn active_counts_never_grow_across_layers(
        n in 1usize..60,
        rhos in proptest::collection::vec(0.05f64..=1.0, 1..5),
        seed in any::<u64>(),
    ) {
        let tokens: Vec<u32> = (0..n as u32).collect();
        let mut active = ActiveSet {
            layer: 0,
            text_tokens: BTreeSet::new(),
            visual_tokens: BTreeMap::from([(0, tokens)]),
        };
        let mut prev = n;
        for (l, &rho) in rhos.iter().enumerate() {
            let toks = active.visual_tokens[&0].clone();
            let mix = |i: u32, salt: u64| ((u64::from(i) ^ seed ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40) as f64;
            let scores = BTreeMap::from([(0, VisualScore {
                frame_index: 0,
                attention: toks.iter().map(|&t| mix(t, 1)).collect(),
                event: toks.iter().map(|&t| mix(t, 2)).collect(),
                tokens: toks,
            })]);
            let (next, rec) = prune_layer(&active, &scores, 0.5, rho, l as u32 + 1).unwrap();
            let now = next.visual_count();
            prop_assert!(now <= prev && now >= 1);
            prop_assert_eq!(rec[0].budget, now);
            prev = now;
            active = next;
        }
    }

    #[test]
    fn event_rank_breaks_equal_attention_rank(
        ra in 0.0f64..=1.0,
        rm_j in 0.0f64..1.0,
        bump in 1e-6f64..1.0,
        gamma in 1e-6f64..=1.0,
    ) {
        let rm_u = (rm_j + bump).min(1.0);
        prop_assume!(rm_u > rm_j);
        let u = RankedToken { attention_rank: ra, event_rank: rm_u };
        let j = RankedToken { attention_rank: ra, event_rank: rm_j };
        prop_assert!(u.calibrated(gamma) > j.calibrated(gamma));
    }
}
