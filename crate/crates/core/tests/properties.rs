use irscov::eval;
use irscov::geostat::{self, VariogramModel};
use irscov::measurement::{PhaseAlphabet, ReflectionPattern};
use irscov::num::{cn, inner, norm_sqr};
use irscov::optimize::{self, ObjectiveModel};
use irscov::propagation::ChannelModel;
use irscov::scene::{build_grids, steering_upa, synth_scene, Region, SynthParams};
use irscov::seed::{derive_rng, derive_seed};
use irscov::Cplx;
use proptest::prelude::*;

fn vectors(seed: u64, k: usize, n: usize) -> Vec<Vec<Cplx<f64>>> {
    let mut rng = derive_rng(seed, "prop", &[]);
    (0..k).map(|_| (0..n).map(|_| cn(&mut rng, 1.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn steering_entries_are_unit_modulus(theta in 0.0..std::f64::consts::PI, phi in 0.0..std::f64::consts::PI, ny in 1usize..6, nz in 1usize..6) {
        let u = steering_upa(theta, phi, ny, nz).unwrap();
        prop_assert_eq!(u.len(), ny * nz);
        for z in &u {
            prop_assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alphabet_nearest_inverts_phase(bits in 1u32..=8, idx in 0usize..256) {
        let a = PhaseAlphabet::new(bits).unwrap();
        let i = idx % a.size();
        prop_assert_eq!(a.nearest(a.phase::<f64>(i)), i);
        prop_assert_eq!(a.nearest(a.phase::<f64>(i) + 2.0 * std::f64::consts::PI), i);
    }

    #[test]
    fn objective_ignores_global_rotation(seed in any::<u64>(), bits in 1u32..=3, k in 1usize..4, shift in 0usize..8) {
        let a = PhaseAlphabet::new(bits).unwrap();
        let n = 5;
        let model = ObjectiveModel::new(a, vectors(seed, k, n)).unwrap();
        let mut rng = derive_rng(seed, "prop/idx", &[]);
        let idx: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..a.size())).collect();
        let rotated: Vec<usize> = idx.iter().map(|i| (i + shift) % a.size()).collect();
        let x = model.objective_indices(&idx).unwrap();
        let y = model.objective_indices(&rotated).unwrap();
        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
    }

    #[test]
    fn refinement_never_decreases(seed in any::<u64>(), bits in 1u32..=3, k in 1usize..5) {
        let a = PhaseAlphabet::new(bits).unwrap();
        let n = 6;
        let model = ObjectiveModel::new(a, vectors(seed, k, n)).unwrap();
        let start = ReflectionPattern::from_indices(0, a, vec![0; n]).unwrap();
        let r = optimize::successive_refinement(&model, &start, None).unwrap();
        prop_assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(r.objective.unwrap() >= model.objective(&start).unwrap());
    }

    #[test]
    fn nmse_is_phase_invariant_and_nonnegative(seed in any::<u64>(), phase in 0.0..6.3f64) {
        let v = vectors(seed, 2, 6);
        let rot: Vec<Cplx<f64>> = v[0].iter().map(|z| z * Cplx::from_polar(1.0, phase)).collect();
        let a = eval::covariance_nmse(&v[0], &v[1]).unwrap().unwrap();
        let b = eval::covariance_nmse(&rot, &v[1]).unwrap().unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        prop_assert!(eval::covariance_nmse(&v[1], &v[1]).unwrap().unwrap() < 1e-12);
    }

    #[test]
    fn expected_power_bounds(seed in 0u64..200, grid in 0usize..25, bits in 1u32..=3) {
        let model = ChannelModel::new(synth_scene(seed, &SynthParams::<f64>::default()).unwrap()).unwrap();
        let sigma2 = 1e-13;
        let truth = model.ground_truth(10.0, sigma2);
        let a = PhaseAlphabet::new(bits).unwrap();
        let mut rng = derive_rng(seed, "prop/pattern", &[]);
        let p = irscov::measurement::random_pattern::<f64, _>(&mut rng, a, model.elements(), 0);
        let e = truth.expected_power(grid, &p.v).unwrap();
        let g = &truth.grids[grid];
        prop_assert!(e >= sigma2);
        prop_assert!((e - g.c - inner(&p.v, &g.h_bar).norm_sqr()).abs() <= 1e-12 * e);
        prop_assert!(inner(&p.v, &g.h_bar).norm_sqr() <= model.elements() as f64 * norm_sqr(&g.h_bar) * (1.0 + 1e-12));
    }

    #[test]
    fn split_partitions_the_region(c0 in 0.0..60.0f64, side in 3.0..30.0f64) {
        let region = Region { d1: 30.0, d2: 21.0, d0: 3.0, origin: [0.0, 0.0, 1.0] };
        let grids = build_grids(&region).unwrap();
        let split = geostat::split_region(&grids, 30.0, 21.0, 3.0, c0, side).unwrap();
        let mut all: Vec<usize> = split.subregions.iter().flat_map(|s| s.grids.clone()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..grids.len()).collect::<Vec<_>>());
        for s in &split.subregions {
            prop_assert!(s.grids.len() <= split.max_grids);
            if c0 > 0.0 {
                prop_assert!(geostat::max_pairwise_distance(&s.grids, &grids) <= c0 + 1e-9);
            }
        }
    }

    #[test]
    fn typical_count_is_monotone(size in 1usize..60, c1 in 0.1..40.0f64, c2 in 0.1..40.0f64, rho in 0.05..2.0f64) {
        let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        let a = geostat::typical_count(size, 3.0, lo, rho);
        let b = geostat::typical_count(size, 3.0, hi, rho);
        prop_assert!(a >= b);
        prop_assert!((1..=size).contains(&a));
        prop_assert!(geostat::typical_count(size, 3.0, lo, rho * 2.0) >= a);
    }

    #[test]
    fn correlated_range_hits_the_threshold(nugget in 0.0..2.0f64, psill in 0.5..5.0f64, range in 1.0..50.0f64) {
        let c = geostat::correlated_range(nugget, psill, range);
        let m = VariogramModel { nugget, partial_sill: psill, range, c_star: c, uncorrelated: false };
        if nugget < 0.95 * (nugget + psill) {
            prop_assert!(c > 0.0 && c < range);
            prop_assert!((m.value(c) - 0.95 * m.total_sill()).abs() < 1e-9 * m.total_sill());
        }
        let lower = VariogramModel { nugget: nugget * 0.5, ..m };
        prop_assert!(geostat::correlated_range(lower.nugget, psill, range) >= c - 1e-12);
    }

    #[test]
    fn derived_seeds_separate_stages_and_indices(master in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(derive_seed(master, "a", &[i]), derive_seed(master, "a", &[i]));
        prop_assert_ne!(derive_seed(master, "a", &[i]), derive_seed(master, "b", &[i]));
        prop_assert_ne!(derive_seed(master, "a", &[i]), derive_seed(master, "a", &[i + 1]));
    }
}
