use ccica::nets::checkpoint;
use ccica::nets::spline::identity_derivative_param;
use ccica::nets::Model;
use ccica::synthgen::{generate, Dataset, GenerationConfig, LatentFamily};
use ccica::trainer::{train, Regime, TrainConfig};

fn data() -> Dataset {
    let mut g = GenerationConfig::standard(4, 2, 3, LatentFamily::Gaussian, 4);
    g.train_per_domain = 300;
    g.test_per_domain = 100;
    generate(&g).unwrap().dataset
}

fn cfg(regime: Regime) -> TrainConfig {
    TrainConfig {
        regime,
        epochs: 4,
        batch_size: 64,
        lr: 0.005,
        memory: 64,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn flow_values(m: &Model, domain: usize) -> Vec<Vec<f64>> {
    let f = m.flows().get(domain).unwrap();
    [f.widths, f.heights, f.derivs].iter().map(|&id| m.params.get(id).data().to_vec()).collect()
}

#[test]
fn joint_training_moves_every_domain_flow() {
    let ds = data();
    let rec = train(&ds, &cfg(Regime::Joint)).unwrap();
    let id = identity_derivative_param();
    for u in ds.domains() {
        let v = flow_values(&rec.model, u);
        let moved = v[0].iter().chain(&v[1]).any(|&x| x != 0.0) || v[2].iter().any(|&x| x != id);
        assert!(moved, "flow of domain {u} untouched");
    }
}

#[test]
fn baseline_leaves_past_flows_alone() {
    let ds = data();
    let rec = train(&ds, &cfg(Regime::Baseline)).unwrap();
    assert_eq!(rec.checkpoints.len(), 3);
    let first = ds.domains()[0];
    let (after_first, _) = checkpoint::from_bytes(&rec.checkpoints[0].bytes).unwrap();
    assert_eq!(flow_values(&after_first, first), flow_values(&rec.model, first));
}

#[test]
fn gem_moves_past_flows_only_through_projection() {
    let ds = data();
    let rec = train(&ds, &cfg(Regime::ContinualGem)).unwrap();
    let first = ds.domains()[0];
    let (after_first, _) = checkpoint::from_bytes(&rec.checkpoints[0].bytes).unwrap();
    assert!(rec.projected_steps > 0);
    assert_ne!(flow_values(&after_first, first), flow_values(&rec.model, first));
}

#[test]
fn loss_falls_within_each_run() {
    let ds = data();
    for regime in Regime::ALL {
        let rec = train(&ds, &cfg(regime)).unwrap();
        let first = rec.losses.first().unwrap().loss.total;
        let last = rec.losses.last().unwrap().loss.total;
        assert!(last < first, "{regime}: {first} -> {last}");
    }
}

#[test]
fn runs_are_reproducible_and_seed_dependent() {
    let ds = data();
    for regime in Regime::ALL {
        let a = train(&ds, &cfg(regime)).unwrap();
        let b = train(&ds, &cfg(regime)).unwrap();
        assert_eq!(a.model.params.flat_values(), b.model.params.flat_values());
        assert_eq!(a.losses, b.losses);
        let c = train(&ds, &TrainConfig { seed: 4, ..cfg(regime) }).unwrap();
        assert_ne!(a.model.params.flat_values(), c.model.params.flat_values());
    }
}

#[test]
fn gem_projects_some_steps_and_baseline_none() {
    let ds = data();
    let gem = train(&ds, &cfg(Regime::ContinualGem)).unwrap();
    let base = train(&ds, &cfg(Regime::Baseline)).unwrap();
    assert!(gem.projected_steps > 0);
    assert_eq!(base.projected_steps, 0);
}
