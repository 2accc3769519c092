use ccica::mcc::{corr_table, mcc, min_cost_assignment, pearson_abs, RegressionConfig};
use ccica::ndgrad::Tensor;
use ccica::rng;
use proptest::prelude::*;

fn sample(n: usize, k: usize, seed: u64) -> Tensor {
    Tensor::matrix(n, k, rng::normals(&mut rng::seeded(seed), n * k)).unwrap()
}

fn map_cols(t: &Tensor, f: impl Fn(usize, &[f64]) -> Vec<f64>) -> Tensor {
    let mut data = vec![0.0; t.len()];
    let (n, k) = (t.rows(), t.cols());
    for j in 0..k {
        let col: Vec<f64> = (0..n).map(|i| t.at(i, j)).collect();
        for (i, v) in f(j, &col).into_iter().enumerate() {
            data[i * k + j] = v;
        }
    }
    Tensor::matrix(n, k, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn correlation_table_ignores_sign_and_scale(seed in 0u64..1000, scales in prop::collection::vec(0.1..10.0f64, 3), flips in prop::collection::vec(any::<bool>(), 3)) {
        let z = sample(300, 3, seed);
        let est = map_cols(&z, |_, c| c.iter().map(|v| v + 0.5 * v.powi(2)).collect());
        let warped = map_cols(&est, |j, c| {
            let s = if flips[j] { -scales[j] } else { scales[j] };
            c.iter().map(|v| s * v + 3.0).collect()
        });
        let a = corr_table(&est, &z).unwrap();
        let b = corr_table(&warped, &z).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mcc_ignores_estimate_order(seed in 0u64..1000, perm in Just(vec![2usize, 0, 1]).prop_shuffle()) {
        let z = sample(400, 3, seed);
        let noise = sample(400, 3, seed + 5000);
        let est = map_cols(&z, |j, c| c.iter().enumerate().map(|(i, v)| v.powi(3) + 0.3 * noise.at(i, j)).collect());
        let permuted = map_cols(&est, |j, _| (0..400).map(|i| est.at(i, perm[j])).collect());
        let cfg = RegressionConfig { epochs: 30, ..RegressionConfig::default() };
        let a = mcc(&est, &z, &cfg).unwrap();
        let b = mcc(&permuted, &z, &cfg).unwrap();
        prop_assert!((a.mcc - b.mcc).abs() < 1e-12);
        for t in 0..3 {
            prop_assert_eq!(perm[b.assignment[t]], a.assignment[t]);
        }
    }

    #[test]
    fn assignment_is_a_permutation(table in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 5), 5)) {
        let mut a = min_cost_assignment(&table);
        a.sort_unstable();
        prop_assert_eq!(a, vec![0, 1, 2, 3, 4]);
    }
}

#[test]
fn pearson_cases() {
    let z = sample(100_000, 2, 1);
    let a: Vec<f64> = (0..z.rows()).map(|i| z.at(i, 0)).collect();
    let b: Vec<f64> = (0..z.rows()).map(|i| z.at(i, 1)).collect();
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert!((pearson_abs(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson_abs(&a, &neg).unwrap() - 1.0).abs() < 1e-12);
    assert!(pearson_abs(&a, &b).unwrap() < 0.02);
}

#[test]
fn raw_cubic_correlation_matches_closed_form() {
    // corr(z, z^3) = E[z^4] / sqrt(E[z^6]) = 3 / sqrt(15) for z ~ N(0, 1).
    let z = sample(200_000, 1, 2);
    let a: Vec<f64> = z.data().to_vec();
    let c: Vec<f64> = a.iter().map(|v| v.powi(3)).collect();
    let r = pearson_abs(&a, &c).unwrap();
    assert!((r - 3.0 / 15f64.sqrt()).abs() < 0.01, "{r}");
}
