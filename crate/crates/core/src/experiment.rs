//! Experiment matrix: scenarios x regimes x seeds, MCC evaluation and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mcc::{self, RegressionConfig};
use crate::nets::{checkpoint, Model};
use crate::rng;
use crate::synthgen::{self, Dataset, DomainSpec, GenerationConfig, LatentDist, LatentFamily, SpecFile};
use crate::trainer::{self, dataset_hash, Regime, TrainConfig};

pub mod plot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Default,
    RepeatedPartial,
    OrderingZ1,
    IncreasingDomains,
    Custom,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Default,
        Scenario::RepeatedPartial,
        Scenario::OrderingZ1,
        Scenario::IncreasingDomains,
        Scenario::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Default => "default",
            Scenario::RepeatedPartial => "repeated-partial",
            Scenario::OrderingZ1 => "ordering-z1",
            Scenario::IncreasingDomains => "increasing-domains",
            Scenario::Custom => "custom",
        }
    }

    /// Whether every intermediate checkpoint is evaluated by default.
    pub fn series_by_default(self) -> bool {
        matches!(self, Scenario::RepeatedPartial | Scenario::IncreasingDomains)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Scenario::ALL.iter().map(|c| c.as_str()).collect();
                format!("unknown scenario '{s}' (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub regression: RegressionConfig,
    /// Evaluate every per-domain checkpoint (joint: retrain on each prefix).
    /// `None` uses the scenario's default.
    pub series: Option<bool>,
    /// Put measured seconds in `runtime_s` (breaks byte-identical reruns).
    pub record_wall_clock: bool,
    pub save_checkpoints: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            regression: RegressionConfig::default(),
            series: None,
            record_wall_clock: false,
            save_checkpoints: true,
        }
    }
}

fn default_regimes() -> Vec<Regime> {
    Regime::ALL.to_vec()
}

/// Full description of an experiment; read from JSON.
///
/// `generation.seed` and `train.seed`/`train.regime` are overridden per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_file: Option<PathBuf>,
    pub generation: GenerationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub evaluation: EvalOptions,
}

impl ExperimentConfig {
    /// Desk-scale preset for a named scenario.
    pub fn preset(scenario: Scenario) -> Self {
        let (n, n_s, domains) = match scenario {
            Scenario::OrderingZ1 => (2, 2, 3),
            Scenario::RepeatedPartial | Scenario::IncreasingDomains => (4, 2, 15),
            Scenario::Default | Scenario::Custom => (4, 2, 5),
        };
        let mut generation = GenerationConfig::standard(n, n_s, domains, LatentFamily::Gaussian, 0);
        generation.train_per_domain = 2000;
        generation.test_per_domain = 1000;
        Self {
            scenario,
            scenario_file: None,
            generation,
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            regimes: default_regimes(),
            seeds: vec![0, 1, 2],
            evaluation: EvalOptions::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("parsing experiment config")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        // Relative scenario files resolve against the config's directory.
        if let (Some(f), Some(dir)) = (cfg.scenario_file.as_mut(), path.parent()) {
            if f.is_relative() {
                *f = dir.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn series(&self) -> bool {
        self.evaluation.series.unwrap_or(self.scenario.series_by_default())
    }

    /// Reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds must not be empty".to_string());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            errs.push("seeds must be distinct".to_string());
        }
        if self.regimes.is_empty() {
            errs.push("regimes must not be empty".to_string());
        }
        let mut r = self.regimes.clone();
        r.sort_unstable();
        r.dedup();
        if r.len() != self.regimes.len() {
            errs.push("regimes must be distinct".to_string());
        }
        if let Err(e) = self.generation.validate() {
            errs.push(format!("generation: {e}"));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.memory == 0 {
            errs.push("train: epochs, batch_size and memory must be positive".to_string());
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            errs.push(format!("train: lr must be positive, got {}", t.lr));
        }
        if t.alpha < 0.0 || t.beta < 0.0 {
            errs.push("train: alpha and beta must be non-negative".to_string());
        }
        if !t.order.is_empty() {
            errs.push("train: order is fixed by the scenario; leave it empty".to_string());
        }
        let reg = &self.evaluation.regression;
        if reg.hidden == 0 || reg.epochs == 0 || !(reg.lr > 0.0) {
            errs.push("evaluation.regression: hidden, epochs and lr must be positive".to_string());
        }
        let g = &self.generation;
        if g.test_per_domain * g.domains < mcc::MIN_SAMPLES {
            errs.push(format!("generation: too few test samples for MCC (need {} in total)", mcc::MIN_SAMPLES));
        }
        match self.scenario {
            Scenario::Custom => {
                if self.scenario_file.is_none() {
                    errs.push("scenario 'custom' needs scenario_file".to_string());
                }
            }
            other => {
                if self.scenario_file.is_some() {
                    errs.push(format!("scenario_file is only valid with scenario 'custom', not '{other}'"));
                }
            }
        }
        match self.scenario {
            Scenario::OrderingZ1 => {
                if g.n_s != 2 || g.domains != 3 {
                    errs.push("scenario 'ordering-z1' needs n_s = 2 and 3 domains".to_string());
                }
                if g.family != LatentFamily::Gaussian {
                    errs.push("scenario 'ordering-z1' uses the gaussian family".to_string());
                }
            }
            Scenario::RepeatedPartial => {
                if g.n_s < 2 || g.domains < 3 {
                    errs.push("scenario 'repeated-partial' needs n_s >= 2 and at least 3 domains".to_string());
                }
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("invalid experiment config:\n  - {}", errs.join("\n  - "))
        }
    }
}

/// Number of distinct distributions of the repeating latent.
pub const REPEATED_DISTINCT: usize = 3;

/// Per-domain specs of a scenario for one seed.
pub fn scenario_specs(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<DomainSpec>> {
    let mut g = cfg.generation.clone();
    g.seed = seed;
    let specs = match cfg.scenario {
        Scenario::Default | Scenario::IncreasingDomains => {
            synthgen::sample_domain_specs(&g, &mut rng::stream(seed, "domain-specs"))
        }
        Scenario::RepeatedPartial => {
            // Last changing latent cycles through a small pool; the others
            // change in every domain.
            let mut specs = synthgen::sample_domain_specs(&g, &mut rng::stream(seed, "domain-specs"));
            let mut r = rng::stream(seed, "repeated-specs");
            let pool: Vec<LatentDist> = (0..REPEATED_DISTINCT)
                .map(|_| synthgen::sample_dist(g.family, g.combine, &mut r))
                .collect();
            for (u, s) in specs.iter_mut().enumerate() {
                *s.changing.last_mut().expect("n_s >= 1") = pool[u % REPEATED_DISTINCT];
            }
            specs
        }
        Scenario::OrderingZ1 => {
            // (A1, A2), (B1, A2), (B1, B2)
            let mut r = rng::stream(seed, "ordering-specs");
            let mut draw = || synthgen::sample_dist(LatentFamily::Gaussian, g.combine, &mut r);
            let (a1, b1, a2, b2) = (draw(), draw(), draw(), draw());
            [[a1, a2], [b1, a2], [b1, b2]]
                .into_iter()
                .enumerate()
                .map(|(domain, c)| DomainSpec {
                    domain,
                    changing: c.to_vec(),
                })
                .collect()
        }
        Scenario::Custom => {
            let path = cfg.scenario_file.as_ref().context("scenario 'custom' needs scenario_file")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: SpecFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            file.validate()?;
            if file.n_s != g.n_s || file.domains.len() != g.domains {
                bail!(
                    "{}: {} domains with n_s = {}, but generation has {} domains with n_s = {}",
                    path.display(),
                    file.domains.len(),
                    file.n_s,
                    g.domains,
                    g.n_s
                );
            }
            file.domains
        }
    };
    Ok(specs)
}

/// Generates the dataset of one seed.
pub fn scenario_data(cfg: &ExperimentConfig, seed: u64) -> Result<synthgen::Generated> {
    let mut g = cfg.generation.clone();
    g.seed = seed;
    let specs = scenario_specs(cfg, seed)?;
    Ok(synthgen::generate_with_specs(&g, specs)?)
}

/// MCC of one model on the changing latents of a test set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub train_domains: usize,
    pub mcc: f64,
    pub per_latent: Vec<f64>,
    pub raw_per_latent: Vec<f64>,
    pub assignment: Vec<usize>,
    pub fallback: Vec<bool>,
}

/// Encoder posterior means of the changing block against the true changing
/// latents, over the test split of every domain in `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset, train_domains: usize, reg: &RegressionConfig) -> Result<Evaluation> {
    let (x, z) = dataset.stacked_test(&dataset.domains());
    let n_c = dataset.n - dataset.n_s;
    let means = model.posterior_means(&x)?;
    let est = means.slice_cols(n_c, dataset.n_s);
    let truth = z.slice_cols(n_c, dataset.n_s);
    let rep = mcc::mcc(&est, &truth, reg)?;
    Ok(Evaluation {
        train_domains,
        mcc: rep.mcc,
        per_latent: rep.per_latent(),
        raw_per_latent: rep.assignment.iter().enumerate().map(|(t, &e)| rep.corr_table[t][e]).collect(),
        assignment: rep.assignment.clone(),
        fallback: rep.pairs.iter().map(|p| p.fallback).collect(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CellResult {
    pub regime: Regime,
    pub seed: u64,
    pub error: Option<String>,
    pub evaluations: Vec<Evaluation>,
    pub steps: usize,
    pub projected_steps: usize,
    pub wall_clock_s: f64,
    #[serde(skip)]
    pub checkpoints: Vec<(String, Vec<u8>)>,
}

fn run_cell(cfg: &ExperimentConfig, data: &Dataset, regime: Regime, seed: u64) -> Result<CellResult> {
    let start = Instant::now();
    let tc = TrainConfig {
        regime,
        seed,
        ..cfg.train.clone()
    };
    let reg = RegressionConfig {
        seed,
        ..cfg.evaluation.regression
    };
    let domains = data.domains();
    let mut out = CellResult {
        regime,
        seed,
        error: None,
        evaluations: Vec::new(),
        steps: 0,
        projected_steps: 0,
        wall_clock_s: 0.0,
        checkpoints: Vec::new(),
    };
    let tag = |t: usize| format!("{regime}-seed{seed}-d{t}");
    if regime == Regime::Joint && cfg.series() {
        for t in 1..=domains.len() {
            let prefix = data.restrict(&domains[..t]);
            let rec = trainer::train(&prefix, &tc)?;
            out.steps += rec.steps;
            out.evaluations.push(evaluate(&rec.model, data, t, &reg)?);
            out.checkpoints.push((tag(t), checkpoint::to_bytes(&rec.model, Some(&rec.adam))));
        }
    } else {
        let rec = trainer::train(data, &tc)?;
        out.steps = rec.steps;
        out.projected_steps = rec.projected_steps;
        if cfg.series() {
            for (t, ck) in rec.checkpoints.iter().enumerate() {
                let (model, _) = checkpoint::from_bytes(&ck.bytes)?;
                out.evaluations.push(evaluate(&model, data, t + 1, &reg)?);
                out.checkpoints.push((tag(t + 1), ck.bytes.clone()));
            }
        } else {
            out.evaluations.push(evaluate(&rec.model, data, domains.len(), &reg)?);
            out.checkpoints.push((tag(domains.len()), checkpoint::to_bytes(&rec.model, Some(&rec.adam))));
        }
    }
    out.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub regime: Regime,
    pub train_domains: usize,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub per_latent_mean: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub regime: Regime,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<Failure>,
    pub dataset_hashes: BTreeMap<u64, String>,
    pub specs: BTreeMap<u64, Vec<DomainSpec>>,
    pub wall_clock_s: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn aggregate(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for &regime in &cfg.regimes {
        let mut by_t: BTreeMap<usize, Vec<&Evaluation>> = BTreeMap::new();
        for c in cells.iter().filter(|c| c.regime == regime && c.error.is_none()) {
            for e in &c.evaluations {
                by_t.entry(e.train_domains).or_default().push(e);
            }
        }
        for (t, evals) in by_t {
            let (mean, std) = mean_std(&evals.iter().map(|e| e.mcc).collect::<Vec<_>>());
            let k = evals[0].per_latent.len();
            let per_latent_mean = (0..k)
                .map(|i| evals.iter().map(|e| e.per_latent[i]).sum::<f64>() / evals.len() as f64)
                .collect();
            out.push(Aggregate {
                regime,
                train_domains: t,
                count: evals.len(),
                mean,
                std,
                per_latent_mean,
            });
        }
    }
    out
}

/// Runs the whole matrix on a pool of `jobs` threads (0 = logical cores).
pub fn run(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")?;
    let datasets: Vec<(u64, Result<synthgen::Generated, String>)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| (s, scenario_data(cfg, s).map_err(|e| format!("{e:#}"))))
            .collect()
    });
    let cells_spec: Vec<(Regime, u64, usize)> = cfg
        .regimes
        .iter()
        .flat_map(|&r| (0..cfg.seeds.len()).map(move |i| (r, cfg.seeds[i], i)))
        .collect();
    let cells: Vec<CellResult> = pool.install(|| {
        cells_spec
            .par_iter()
            .map(|&(regime, seed, i)| {
                let res = match &datasets[i].1 {
                    Ok(g) => run_cell(cfg, &g.dataset, regime, seed).map_err(|e| format!("{e:#}")),
                    Err(e) => Err(format!("data generation: {e}")),
                };
                match res {
                    Ok(c) => {
                        log::info!("{regime} seed {seed}: done in {:.1}s", c.wall_clock_s);
                        c
                    }
                    Err(error) => {
                        log::error!("{regime} seed {seed}: {error}");
                        CellResult {
                            regime,
                            seed,
                            error: Some(error),
                            evaluations: Vec::new(),
                            steps: 0,
                            projected_steps: 0,
                            wall_clock_s: 0.0,
                            checkpoints: Vec::new(),
                        }
                    }
                }
            })
            .collect()
    });
    let failures = cells
        .iter()
        .filter_map(|c| {
            c.error.as_ref().map(|e| Failure {
                regime: c.regime,
                seed: c.seed,
                error: e.clone(),
            })
        })
        .collect();
    let mut dataset_hashes = BTreeMap::new();
    let mut specs = BTreeMap::new();
    for (s, g) in &datasets {
        if let Ok(g) = g {
            dataset_hashes.insert(*s, dataset_hash(&g.dataset));
            specs.insert(*s, g.specs.clone());
        }
    }
    Ok(ExperimentOutcome {
        aggregates: aggregate(cfg, &cells),
        config: cfg.clone(),
        cells,
        failures,
        dataset_hashes,
        specs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

impl ExperimentOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }

    /// `regime,seed,train_domains,mcc,runtime_s`: per-seed rows, then `mean`
    /// and `std` rows, for each regime in config order.
    pub fn results_csv(&self) -> String {
        let wall = self.config.evaluation.record_wall_clock;
        let mut s = String::from("regime,seed,train_domains,mcc,runtime_s\n");
        for &regime in &self.config.regimes {
            for c in self.cells.iter().filter(|c| c.regime == regime) {
                let rt = if wall { format!("{}", c.wall_clock_s) } else { "NA".into() };
                if c.error.is_some() {
                    s += &format!("{regime},{},NA,NA,{rt}\n", c.seed);
                }
                for e in &c.evaluations {
                    s += &format!("{regime},{},{},{},{rt}\n", c.seed, e.train_domains, e.mcc);
                }
            }
            for a in self.aggregates.iter().filter(|a| a.regime == regime) {
                s += &format!("{regime},mean,{},{},NA\n", a.train_domains, a.mean);
                s += &format!("{regime},std,{},{},NA\n", a.train_domains, a.std);
            }
        }
        s
    }

    /// `regime,seed,train_domains,latent,corr,raw_corr,estimate,fallback`.
    pub fn per_latent_csv(&self) -> String {
        let mut s = String::from("regime,seed,train_domains,latent,corr,raw_corr,estimate,fallback\n");
        for &regime in &self.config.regimes {
            for c in self.cells.iter().filter(|c| c.regime == regime) {
                for e in &c.evaluations {
                    for i in 0..e.per_latent.len() {
                        s += &format!(
                            "{regime},{},{},{},{},{},{},{}\n",
                            c.seed,
                            e.train_domains,
                            i + 1,
                            e.per_latent[i],
                            e.raw_per_latent[i],
                            e.assignment[i] + 1,
                            e.fallback[i]
                        );
                    }
                }
            }
        }
        s
    }

    /// Mean MCC of `regime` after `train_domains` domains.
    pub fn mean_mcc(&self, regime: Regime, train_domains: usize) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.regime == regime && a.train_domains == train_domains)
            .map(|a| a.mean)
    }

    /// Writes results.csv, per_latent.csv, summary.json, plots/ and
    /// (optionally) checkpoints/ under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("plots")).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("results.csv"), self.results_csv())?;
        fs::write(dir.join("per_latent.csv"), self.per_latent_csv())?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)?)?;
        self.write_plots(&dir.join("plots"))?;
        if self.config.evaluation.save_checkpoints {
            let ck = dir.join("checkpoints");
            fs::create_dir_all(&ck)?;
            for c in &self.cells {
                for (name, bytes) in &c.checkpoints {
                    fs::write(ck.join(format!("{name}.ckpt")), bytes)?;
                }
            }
        }
        Ok(())
    }

    fn write_plots(&self, dir: &Path) -> Result<()> {
        let series = |f: &dyn Fn(&Aggregate) -> f64| -> Vec<plot::Series> {
            self.config
                .regimes
                .iter()
                .map(|&r| plot::Series {
                    label: r.to_string(),
                    points: self
                        .aggregates
                        .iter()
                        .filter(|a| a.regime == r)
                        .map(|a| (a.train_domains as f64, f(a)))
                        .collect(),
                })
                .collect()
        };
        let title = format!("{} scenario", self.config.scenario);
        fs::write(
            dir.join("mcc.svg"),
            plot::line_chart(&title, "number of domains", "MCC", &series(&|a| a.mean)),
        )?;
        for i in 0..self.config.generation.n_s {
            fs::write(
                dir.join(format!("mcc_z{}.svg", i + 1)),
                plot::line_chart(
                    &format!("{title}, changing latent {}", i + 1),
                    "number of domains",
                    "MCC",
                    &series(&|a| a.per_latent_mean.get(i).copied().unwrap_or(f64::NAN)),
                ),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scenario: Scenario) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(scenario);
        c.generation.domains = 3;
        c.generation.train_per_domain = 120;
        c.generation.test_per_domain = 60;
        c.train.epochs = 1;
        c.train.batch_size = 64;
        c.evaluation.regression.epochs = 5;
        c.seeds = vec![3, 4];
        c
    }

    #[test]
    fn config_rejects_unknown_fields_and_collects_errors() {
        let mut v = serde_json::to_value(ExperimentConfig::preset(Scenario::Default)).unwrap();
        v["bogus"] = 1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());

        let mut c = ExperimentConfig::preset(Scenario::OrderingZ1);
        c.seeds.clear();
        c.generation.domains = 4;
        c.train.lr = 0.0;
        let msg = c.validate().unwrap_err().to_string();
        for needle in ["seeds", "lr", "ordering-z1"] {
            assert!(msg.contains(needle), "{msg}");
        }
        let round = ExperimentConfig::from_json(&serde_json::to_string(&ExperimentConfig::preset(Scenario::Default)).unwrap()).unwrap();
        assert_eq!(round, ExperimentConfig::preset(Scenario::Default));
    }

    #[test]
    fn scenario_specs_have_the_designed_structure() {
        let c = ExperimentConfig::preset(Scenario::OrderingZ1);
        let s = scenario_specs(&c, 1).unwrap();
        assert_eq!(s[0].changing[1], s[1].changing[1]);
        assert_ne!(s[0].changing[0], s[1].changing[0]);
        assert_eq!(s[1].changing[0], s[2].changing[0]);
        assert_ne!(s[1].changing[1], s[2].changing[1]);

        let c = ExperimentConfig::preset(Scenario::RepeatedPartial);
        let s = scenario_specs(&c, 1).unwrap();
        let last: Vec<_> = s.iter().map(|d| d.changing[1]).collect();
        for u in 0..s.len() {
            assert_eq!(last[u], last[u % REPEATED_DISTINCT]);
        }
        assert_ne!(last[0], last[1]);
        assert_ne!(s[0].changing[0], s[3].changing[0]);
    }

    #[test]
    fn matrix_rows_and_reruns_match() {
        let c = tiny(Scenario::Default);
        let a = run(&c, 2).unwrap();
        assert!(a.succeeded());
        let csv = a.results_csv();
        let lines: Vec<_> = csv.lines().collect();
        // 3 regimes x (2 seeds + mean + std)
        assert_eq!(lines.len(), 1 + 3 * 4);
        assert!(lines[1].starts_with("continual-gem,3,3,"));
        assert!(lines[3].starts_with("continual-gem,mean,3,"));
        assert!(lines.iter().skip(1).all(|l| l.ends_with(",NA")));
        let b = run(&c, 1).unwrap();
        assert_eq!(csv, b.results_csv());
        assert_eq!(a.per_latent_csv(), b.per_latent_csv());
    }

    #[test]
    fn series_has_one_evaluation_per_domain() {
        let mut c = tiny(Scenario::IncreasingDomains);
        c.regimes = vec![Regime::Baseline, Regime::Joint];
        c.seeds = vec![1];
        let out = run(&c, 0).unwrap();
        for cell in &out.cells {
            let ts: Vec<_> = cell.evaluations.iter().map(|e| e.train_domains).collect();
            assert_eq!(ts, vec![1, 2, 3]);
            assert_eq!(cell.checkpoints.len(), 3);
        }
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        for f in ["results.csv", "per_latent.csv", "summary.json", "plots/mcc.svg", "plots/mcc_z2.svg", "checkpoints/joint-seed1-d2.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn failed_cells_are_recorded() {
        let mut c = tiny(Scenario::Custom);
        c.scenario_file = Some(PathBuf::from("/nonexistent/specs.json"));
        c.regimes = vec![Regime::Baseline];
        c.seeds = vec![0];
        let out = run(&c, 1).unwrap();
        assert!(!out.succeeded());
        assert_eq!(out.failures.len(), 1);
        assert!(out.results_csv().contains("baseline,0,NA,NA,NA"));
    }
}
