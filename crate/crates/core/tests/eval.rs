use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use soundssl::eval::{
    balanced_accuracy, mean_std, paired_ttest, read_features_csv, silhouette, silhouette_samples, student_t_cdf,
    write_features_csv, EvalError, FeatureRow,
};

#[path = "support/oracles.rs"]
#[allow(dead_code)]
mod oracles;

use oracles::{p_simpson, silhouette_oracle};

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn blobs(n: usize, k: usize, spread: f64, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % k;
        x.push((0..3).map(|d| if d == c % 3 { sep * (1 + c / 3) as f64 } else { 0.0 } + r.gen_range(-spread..spread)).collect());
        y.push(c);
    }
    (x, y)
}

#[test]
fn silhouette_matches_brute_force() {
    let (x, y) = blobs(200, 4, 1.0, 1.5, 3);
    let s = silhouette(&x, &y).unwrap();
    assert!((s - silhouette_oracle(&x, &y)).abs() < 1e-12, "{s}");
}

#[test]
fn silhouette_of_separated_and_shuffled_clusters() {
    let (x, y) = blobs(120, 2, 0.1, 10.0, 4);
    assert!(silhouette(&x, &y).unwrap() > 0.95);
    let mut shuffled = y.clone();
    rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng(5));
    assert!(silhouette(&x, &shuffled).unwrap().abs() < 0.2);
}

#[test]
fn silhouette_singletons_and_bounds() {
    let x = vec![vec![0.0], vec![0.1], vec![5.0]];
    let s = silhouette_samples(&x, &[0, 0, 1]).unwrap();
    assert_eq!(s[2], 0.0);
    assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(matches!(silhouette(&x[..1], &[0]), Err(EvalError::TooFew { .. })));
}

#[test]
fn ttest_p_values_match_numerical_integration() {
    let mut r = rng(7);
    for k in [3usize, 5, 10, 30] {
        for _ in 0..5 {
            let a: Vec<f64> = (0..k).map(|_| r.gen_range(0.3..0.9)).collect();
            let b: Vec<f64> = a.iter().map(|v| v - r.gen_range(-0.05..0.15)).collect();
            let tt = paired_ttest(&a, &b).unwrap();
            assert_eq!(tt.dof, k - 1);
            assert!((tt.p_value - p_simpson(tt.t, (k - 1) as u32)).abs() < 1e-6, "k={k} t={}", tt.t);
        }
    }
}

#[test]
fn ttest_reference_values() {
    // scipy.stats.ttest_rel on the same scores
    let tt = paired_ttest(&[0.65, 0.6, 0.7, 0.8, 1.0], &[0.45, 0.35, 0.2, 0.6, 0.3]).unwrap();
    assert!((tt.t - 3.7186399164590855).abs() < 1e-10);
    assert!((tt.p_value - 0.020498830018746025).abs() < 1e-9);
    assert!(tt.reject);
    assert!((2.0 * student_t_cdf(-2.0, 3.0) - 0.1393259685588431).abs() < 1e-10);
    for dof in [1.0, 2.0, 7.0, 50.0] {
        assert!((student_t_cdf(0.0, dof) - 0.5).abs() < 1e-14);
    }
}

#[test]
fn ttest_zero_variance_cases() {
    let same = paired_ttest(&[0.5, 0.6, 0.7], &[0.5, 0.6, 0.7]).unwrap();
    assert!(same.zero_variance && same.t == 0.0 && same.p_value == 1.0 && !same.reject);
    let shifted = paired_ttest(&[0.6, 0.7, 0.8], &[0.5, 0.6, 0.7]).unwrap();
    assert!(shifted.zero_variance && shifted.t == f64::INFINITY && shifted.p_value == 0.0);
    assert!(matches!(paired_ttest(&[1.0], &[0.0]), Err(EvalError::TooFew { .. })));
}

proptest! {
    #[test]
    fn ttest_shift_invariant(
        a in prop::collection::vec(0.0f64..1.0, 5),
        b in prop::collection::vec(0.0f64..1.0, 5),
        c in -0.5f64..0.5,
    ) {
        let x = paired_ttest(&a, &b).unwrap();
        prop_assume!(!x.zero_variance);
        let a2: Vec<f64> = a.iter().map(|v| v + c).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + c).collect();
        let y = paired_ttest(&a2, &b2).unwrap();
        prop_assert!((x.p_value - y.p_value).abs() < 1e-9);
    }

    #[test]
    fn ttest_pair_order_invariant(
        pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 6),
        rot in 1usize..6,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let (ra, rb): (Vec<f64>, Vec<f64>) = (0..6).map(|i| pairs[(i + rot) % 6]).unzip();
        let x = paired_ttest(&a, &b).unwrap();
        let y = paired_ttest(&ra, &rb).unwrap();
        prop_assert!((x.p_value - y.p_value).abs() < 1e-9);
        let swapped = paired_ttest(&b, &a).unwrap();
        prop_assert!((x.t + swapped.t).abs() < 1e-9 * x.t.abs().max(1.0));
    }

    #[test]
    fn balanced_accuracy_in_unit_interval(preds in prop::collection::vec(0usize..4, 40)) {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let b = balanced_accuracy(&preds, &labels, &[0, 1, 2, 3]).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
    }
}

#[test]
fn balanced_accuracy_hand_table() {
    // class 0: 3/4, class 1: 1/2, class 2 excluded, class 3: 2/2
    let labels = [0, 0, 0, 0, 1, 1, 2, 2, 3, 3];
    let preds = [0, 0, 0, 2, 1, 0, 2, 1, 3, 3];
    let b = balanced_accuracy(&preds, &labels, &[0, 1, 3]).unwrap();
    assert!((b - (0.75 + 0.5 + 1.0) / 3.0).abs() < 1e-15);
    // a prediction of an excluded class still costs its true class
    let preds = [2, 0, 0, 0, 1, 1, 2, 2, 3, 3];
    assert!((balanced_accuracy(&preds, &labels, &[0, 1, 3]).unwrap() - (0.75 + 1.0 + 1.0) / 3.0).abs() < 1e-15);
    assert!(matches!(balanced_accuracy(&preds, &labels, &[5]), Err(EvalError::EmptyClass(5))));
    assert!(matches!(balanced_accuracy(&preds, &labels, &[]), Err(EvalError::EmptySubset)));
}

#[test]
fn feature_dump_reproduces_silhouette() {
    let (x, y) = blobs(60, 3, 1.0, 2.0, 8);
    let names = ["tone", "chirp", "pulse"];
    let rows: Vec<FeatureRow> = x
        .iter()
        .zip(&y)
        .enumerate()
        .map(|(i, (v, &c))| FeatureRow {
            clip_id: format!("clip{i:03}"),
            label: names[c].into(),
            features: v.iter().map(|&f| f as f32).collect(),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("features.csv");
    write_features_csv(&p, &rows).unwrap();
    let back = read_features_csv(&p).unwrap();
    assert_eq!(back, rows);

    let as_f64 = |r: &[FeatureRow]| -> Vec<Vec<f64>> { r.iter().map(|r| r.features.iter().map(|&v| v as f64).collect()).collect() };
    let labels: Vec<usize> = back.iter().map(|r| names.iter().position(|n| *n == r.label).unwrap()).collect();
    assert_eq!(silhouette(&as_f64(&back), &labels).unwrap(), silhouette(&as_f64(&rows), &y).unwrap());
}

#[test]
fn population_std() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
}
