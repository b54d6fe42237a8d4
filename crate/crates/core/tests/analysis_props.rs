use ecp_core::attention_sim::{synth_biased_map, BiasProfile, SynthLayout};
use ecp_core::bias::{partition_regions, peripheral_ratio, profile_correlation, region_ratios};
use ecp_core::flops::flops_model;
use ecp_core::AttentionMap;
use proptest::prelude::*;

fn column_means(map: &AttentionMap, n_visual: usize) -> Vec<f64> {
    let rows = map.rows.len() as f64;
    (0..n_visual)
        .map(|c| map.rows.iter().map(|r| r[c]).sum::<f64>() / rows)
        .collect()
}

proptest! {
    #[test]
    fn regions_cover_the_grid_once(rows in 3usize..30, cols in 3usize..30, f in 0.01f64..0.49) {
        let Ok(p) = partition_regions(rows, cols, f) else { return Ok(()); };
        prop_assert!(p.corner.is_disjoint(&p.edge));
        prop_assert!(p.corner.is_disjoint(&p.center));
        prop_assert!(p.edge.is_disjoint(&p.center));
        prop_assert_eq!(p.corner.len() + p.edge.len() + p.center.len(), rows * cols);
        prop_assert!(p.center.iter().chain(&p.edge).chain(&p.corner).all(|&i| i < rows * cols));
        prop_assert_eq!(p.corner.len(), 4 * p.margin_rows * p.margin_cols);
        prop_assert!(!p.center.is_empty());
    }

    #[test]
    fn ratio_ignores_mass_scale(
        mass in proptest::collection::vec(0.01f64..10.0, 216),
        scale in 1e-3f64..1e3,
    ) {
        let p = partition_regions(12, 18, 0.15).unwrap();
        let scaled: Vec<f64> = mass.iter().map(|m| m * scale).collect();
        let a = peripheral_ratio(&mass, &p).unwrap();
        let b = peripheral_ratio(&scaled, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        let r = region_ratios(&mass, &p).unwrap();
        prop_assert!((r.peripheral - a).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn correlation_is_bounded_and_symmetric(
        pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (Ok(ab), Ok(ba)) = (profile_correlation(&a, &b), profile_correlation(&b, &a)) else {
            return Ok(());
        };
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(profile_correlation(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn synthetic_maps_repeat_per_seed(seed in any::<u64>(), layer in 0u32..28) {
        let p = partition_regions(6, 9, 0.2).unwrap();
        let layout = SynthLayout { frames: vec![0, 3], n_text: 3, text_mass: 1.0 };
        let a = synth_biased_map(&p, &BiasProfile::default(), &layout, layer, seed).unwrap();
        let b = synth_biased_map(&p, &BiasProfile::default(), &layout, layer, seed).unwrap();
        prop_assert!(a == b);
        // maps are stored as f32, so one trip rounds and a second is exact
        let once = AttentionMap::from_bytes(&a.to_bytes()).unwrap();
        prop_assert!(once == AttentionMap::from_bytes(&once.to_bytes()).unwrap());
        let worst = a.rows.iter().flatten().zip(once.rows.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn synthetic_bias_is_recovered(seed in any::<u64>(), m in 0.5f64..3.0) {
        let p = partition_regions(12, 18, 0.15).unwrap();
        let profile = BiasProfile { multipliers: vec![m], noise_scale: 0.25 };
        let layout = SynthLayout { frames: vec![0], n_text: 8, text_mass: 1.0 };
        let map = synth_biased_map(&p, &profile, &layout, 0, seed).unwrap();
        let got = peripheral_ratio(&column_means(&map, p.n_tokens()), &p).unwrap();
        prop_assert!((got - m).abs() < 0.05 * m.max(1.0), "{got} vs {m}");
    }

    #[test]
    fn fewer_tokens_cost_strictly_less(
        counts in proptest::collection::vec(1u64..500, 1..30),
        pick in any::<prop::sample::Index>(),
        d_k in 1u64..256,
    ) {
        let full = vec![500u64; counts.len()];
        let l = pick.index(counts.len());
        prop_assume!(counts[l] > 1);
        let mut fewer = counts.clone();
        fewer[l] -= 1;
        let a = flops_model(&full, &counts, d_k).unwrap();
        let b = flops_model(&full, &fewer, d_k).unwrap();
        prop_assert!(b.cost < a.cost);
        prop_assert!(a.reduction_ratio > 0.0 && a.reduction_ratio <= 1.0);
    }

    #[test]
    fn ratio_is_bounded_by_rho_squared(
        n in 10u64..400,
        rho in 0.05f64..=1.0,
        layers in 1usize..30,
        pruned_from in 0usize..30,
    ) {
        let full = vec![n; layers];
        let kept = ((rho * n as f64).floor() as u64).max(1);
        let counts: Vec<u64> = (0..layers).map(|l| if l >= pruned_from { kept } else { n }).collect();
        let r = flops_model(&full, &counts, 128).unwrap();
        let lower = (kept as f64 / n as f64).powi(2);
        prop_assert!(r.reduction_ratio >= lower - 1e-12);
        prop_assert!(r.reduction_ratio <= 1.0);
        if pruned_from == 0 {
            prop_assert!((r.reduction_ratio - lower).abs() < 1e-12);
        }
    }
}
