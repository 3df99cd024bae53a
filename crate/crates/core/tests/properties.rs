use intra_core::checkpoint::Container;
use intra_core::config::RunConfig;
use intra_core::image::{Dihedral, Image, Plane};
use intra_core::metrics::roc_auc;
use intra_core::patching::{linear_position, select_window, split_into_patches};
use intra_core::scoring::{multiscale_diff, reference_from_maps};
use intra_tensor::Tensor;
use proptest::prelude::*;

fn image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    Image::from_fn(h, w, c, |_, _, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 40) as f32 / (1u64 << 24) as f32
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_position_is_a_bijection(n in 1usize..24) {
        let mut seen = vec![false; n * n + 1];
        for i in 1..=n {
            for j in 1..=n {
                let p = linear_position(i, j, n).unwrap();
                prop_assert!((1..=n * n).contains(&p));
                prop_assert!(!seen[p]);
                seen[p] = true;
            }
        }
        prop_assert!(linear_position(n + 1, 1, n).is_err());
        prop_assert!(linear_position(1, 0, n).is_err());
    }

    #[test]
    fn selected_window_fits_and_centers(n in 1usize..30, m in 1usize..30, side_seed in 0usize..30, t_seed in 0usize..30, u_seed in 0usize..30) {
        let side = 1 + side_seed % n.min(m);
        let (t, u) = (1 + t_seed % n, 1 + u_seed % m);
        let w = select_window(t, u, n, m, side).unwrap();
        prop_assert!(w.contains(t, u));
        prop_assert!(w.r >= 1 && w.r + side - 1 <= n);
        prop_assert!(w.s >= 1 && w.s + side - 1 <= m);
        // no admissible window puts the target closer to the center row
        let best_row = (1..=n - side + 1).map(|r| (t as isize - (r + side / 2) as isize).abs()).min().unwrap();
        prop_assert_eq!((t as isize - (w.r + side / 2) as isize).abs(), best_row);
        let best_col = (1..=m - side + 1).map(|s| (u as isize - (s + side / 2) as isize).abs()).min().unwrap();
        prop_assert_eq!((u as isize - (w.s + side / 2) as isize).abs(), best_col);
    }

    #[test]
    fn split_assemble_round_trip(k in 1usize..6, n in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
        let img = image(k * n, k * n, c, seed);
        let grid = split_into_patches(&img, k).unwrap();
        prop_assert_eq!(grid.rows(), n);
        prop_assert_eq!(grid.patch_dim(), k * k * c);
        prop_assert_eq!(grid.assemble(), img);
    }

    #[test]
    fn dihedral_inverse_restores(n in 1usize..9, c in 1usize..4, idx in 0usize..8, seed in any::<u64>()) {
        let img = image(n, n, c, seed);
        let d = Dihedral::from_index(idx);
        prop_assert_eq!(d.inverse().apply(&d.apply(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn auc_invariant_under_monotone_maps_and_order(
        data in prop::collection::vec((0u8..20, any::<bool>()), 2..80),
        rot in 0usize..80,
    ) {
        let mut labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 7.0).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 2.0).collect();
        prop_assert_eq!(roc_auc(&warped, &labels).unwrap(), auc);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&negated, &labels).unwrap() - (1.0 - auc)).abs() < 1e-12);
        let k = rot % scores.len();
        let (mut s2, mut l2) = (scores.clone(), labels.clone());
        s2.rotate_left(k);
        l2.rotate_left(k);
        prop_assert_eq!(roc_auc(&s2, &l2).unwrap(), auc);
    }

    #[test]
    fn diff_is_symmetric_and_bounded(seed in any::<u64>()) {
        let x = image(32, 32, 3, seed);
        let y = image(32, 32, 3, seed ^ 0x9e37_79b9);
        let a = multiscale_diff(&x, &y).unwrap();
        prop_assert_eq!(&a, &multiscale_diff(&y, &x).unwrap());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn reference_mean_is_order_insensitive(seeds in prop::collection::vec(any::<u64>(), 1..6), rot in 0usize..6) {
        let maps: Vec<Plane> = seeds.iter().map(|&s| image(8, 8, 1, s).channel(0)).collect();
        let a = reference_from_maps(&maps);
        let mut rotated = maps.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        let b = reference_from_maps(&rotated);
        prop_assert_eq!(a.count, maps.len());
        prop_assert!(a.map.data().iter().zip(b.map.data()).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn run_config_text_round_trips(
        latent in 1usize..1024,
        lr in 1e-6f64..1.0,
        alpha in 0.0f64..2.0,
        mfsa in any::<bool>(),
        seed in any::<u64>(),
        steps in prop::option::of(0usize..10_000),
    ) {
        let mut c = RunConfig::default();
        c.model.latent_dim = latent;
        c.model.use_mfsa = mfsa;
        c.train.lr = lr;
        c.train.loss.alpha = alpha;
        c.train.max_steps = steps;
        c.seed = seed;
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn truncated_checkpoints_fail_cleanly(cut_frac in 0.0f64..1.0, flip in any::<u8>(), at_frac in 0.0f64..1.0) {
        let container = Container {
            config_text: RunConfig::default().to_text(),
            tensors: vec![
                ("b".into(), Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap()),
                ("a".into(), Tensor::new([1], vec![0.25]).unwrap()),
            ],
        };
        let bytes = container.encode().unwrap();
        let cut = (cut_frac * bytes.len() as f64) as usize;
        prop_assert!(Container::decode(&bytes[..cut]).is_err());
        let mut corrupt = bytes.clone();
        let at = (at_frac * bytes.len() as f64) as usize;
        corrupt[at] ^= flip;
        // arbitrary corruption must never panic
        let _ = Container::decode(&corrupt);
        let back = Container::decode(&bytes).unwrap();
        prop_assert_eq!(back.tensors[0].0.as_str(), "a");
        prop_assert_eq!(&back.tensors[1].1, &container.tensors[0].1);
    }
}
