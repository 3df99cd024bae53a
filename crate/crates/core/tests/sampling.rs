use intra_core::patching::sample_window_spec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pearson statistic against a uniform expectation.
fn chi_square(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

// upper 0.1% points of the chi-square distribution
const CHI2_999_DF15: f64 = 37.697;
const CHI2_999_DF24: f64 = 51.179;

#[test]
fn anchors_and_targets_are_uniform() {
    let (n, side) = (8, 5);
    let anchors_per_axis = n - side + 1;
    let mut anchors = vec![0usize; anchors_per_axis * anchors_per_axis];
    let mut offsets = vec![0usize; side * side];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..32_000 {
        let w = sample_window_spec(n, n, side, &mut rng).unwrap();
        assert!(w.contains(w.target.0, w.target.1));
        anchors[(w.r - 1) * anchors_per_axis + (w.s - 1)] += 1;
        offsets[w.target_slot()] += 1;
    }
    let a = chi_square(&anchors);
    let o = chi_square(&offsets);
    assert!(a < CHI2_999_DF15, "anchor chi-square {a}");
    assert!(o < CHI2_999_DF24, "target chi-square {o}");
}

#[test]
fn degenerate_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = sample_window_spec(3, 3, 3, &mut rng).unwrap();
    assert_eq!((w.r, w.s), (1, 1));
    assert!(sample_window_spec(3, 3, 4, &mut rng).is_err());
    assert!(sample_window_spec(3, 5, 0, &mut rng).is_err());
}
