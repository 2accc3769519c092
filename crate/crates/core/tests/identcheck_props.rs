mod common;

use ccica::identcheck::{
    check_points, minimal_change_audit, repeated_partial, repeated_partial_relaxed, sample_points, MatrixKind,
};
use ccica::rng;
use ccica::synthgen::{DomainSpec, LatentDist};
use proptest::prelude::*;

fn gaussian(mean: f64, variance: f64) -> LatentDist {
    LatentDist::Gaussian { mean, variance }
}

#[test]
fn random_specs_are_full_rank_almost_everywhere() {
    for n_s in [2, 4] {
        for kind in [MatrixKind::Theorem1, MatrixKind::Lemma1] {
            let f = common::random_full_rank_fraction(n_s, kind, 300, n_s as u64);
            assert!(f >= 0.99, "{kind} n_s={n_s}: {f}");
        }
    }
}

#[test]
fn degenerate_scenario_flags_columns_two_and_four() {
    let specs = repeated_partial();
    let pts = sample_points(&specs, 100, &mut rng::seeded(1));
    let rep = check_points(&specs, MatrixKind::Lemma1, 0, &pts).unwrap();
    assert_eq!(rep.full_rank_fraction, 0.0);
    assert!(rep.dependencies.iter().any(|d| d.columns == (2, 4) && d.points == 100));
}

#[test]
fn relaxed_scenario_is_full_rank_somewhere() {
    let specs = repeated_partial_relaxed();
    let pts = sample_points(&specs, 100, &mut rng::seeded(2));
    let rep = check_points(&specs, MatrixKind::Lemma1, 0, &pts).unwrap();
    assert!(rep.full_rank_fraction > 0.5, "{}", rep.full_rank_fraction);
}

#[test]
fn nine_fully_changing_domains_raise_no_flag() {
    let specs: Vec<DomainSpec> = (0..9)
        .map(|d| DomainSpec {
            domain: d,
            changing: vec![gaussian(d as f64 * 0.5, 0.5), gaussian(-(d as f64) * 0.3, 0.2 + 0.05 * d as f64)],
        })
        .collect();
    assert!(minimal_change_audit(&specs).iter().all(|a| !a.flagged && a.distinct == 9));
}

fn spec_table() -> impl Strategy<Value = Vec<Vec<usize>>> {
    // Each latent picks from a small pool of distributions per domain.
    (1usize..4, 1usize..8).prop_flat_map(|(n_s, domains)| prop::collection::vec(prop::collection::vec(0usize..4, n_s), domains))
}

fn to_specs(table: &[Vec<usize>]) -> Vec<DomainSpec> {
    table
        .iter()
        .enumerate()
        .map(|(d, row)| DomainSpec {
            domain: d,
            changing: row.iter().map(|&k| gaussian(k as f64, 0.5)).collect(),
        })
        .collect()
}

proptest! {
    #[test]
    fn audit_flags_exactly_latents_with_fewer_than_three_distributions(table in spec_table()) {
        let n_s = table[0].len();
        for a in minimal_change_audit(&to_specs(&table)) {
            let mut seen: Vec<usize> = table.iter().map(|r| r[a.latent]).collect();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(a.distinct, seen.len());
            prop_assert_eq!(a.flagged, n_s >= 2 && seen.len() < 3);
        }
    }

    #[test]
    fn audit_ignores_domain_order(table in spec_table(), seed in 0u64..100) {
        let mut shuffled = table.clone();
        let mut r = rng::seeded(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut r);
        prop_assert_eq!(minimal_change_audit(&to_specs(&table)), minimal_change_audit(&to_specs(&shuffled)));
    }
}
