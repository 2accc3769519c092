//! Training regimes: continual with GEM projection, sequential baseline, and
//! joint training on the union of domains.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::elbo::{self, LossBreakdown, LossWeights};
use crate::gem::{self, GemError, MemoryBank, ProjectOptions, StepDiagnostics};
use crate::ndgrad::{Adam, AdamConfig, GradError, Graph, Tensor};
use crate::nets::{checkpoint, Model, ModelConfig};
use crate::rng::{self, RunRng};
use crate::synthgen::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    ContinualGem,
    Baseline,
    Joint,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::ContinualGem, Regime::Baseline, Regime::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::ContinualGem => "continual-gem",
            Regime::Baseline => "baseline",
            Regime::Joint => "joint",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "continual-gem" | "continual" | "gem" => Ok(Regime::ContinualGem),
            "baseline" => Ok(Regime::Baseline),
            "joint" => Ok(Regime::Joint),
            other => Err(format!("unknown regime '{other}' (continual-gem, baseline, joint)")),
        }
    }
}

/// How many passes over the union of domains joint training makes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointBudget {
    /// `T * epochs` passes over the union.
    #[default]
    DomainsTimesEpochs,
    /// `epochs` passes over the union: the same number of samples seen as a
    /// sequential run.
    SameSamples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub memory: usize,
    pub seed: u64,
    /// Domain order; empty means the dataset order.
    pub order: Vec<usize>,
    pub joint_budget: JointBudget,
    /// Optional constraint margin for the projection (0 = none).
    pub margin: f64,
    /// Record per-step projection diagnostics.
    pub diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::ContinualGem,
            epochs: 50,
            batch_size: 256,
            lr: 0.002,
            alpha: 0.1,
            beta: 0.1,
            memory: gem::DEFAULT_CAPACITY,
            seed: 0,
            order: Vec::new(),
            joint_budget: JointBudget::default(),
            margin: 0.0,
            diagnostics: false,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Resolved domain order, checked against the dataset.
    pub fn resolve_order(&self, available: &[usize]) -> Result<Vec<usize>, TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.memory == 0 {
            return Err(TrainError::Config("epochs, batch size and memory must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        if available.is_empty() {
            return Err(TrainError::Config("dataset has no domains".into()));
        }
        if self.order.is_empty() {
            return Ok(available.to_vec());
        }
        let mut a = available.to_vec();
        let mut o = self.order.clone();
        a.sort_unstable();
        o.sort_unstable();
        if a != o {
            return Err(TrainError::Config(format!(
                "order {:?} is not a permutation of the dataset domains {:?}",
                self.order, available
            )));
        }
        Ok(self.order.clone())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("domain {domain:?}, epoch {epoch}, step {step}: {source}")]
    Step {
        domain: Option<usize>,
        epoch: usize,
        step: usize,
        #[source]
        source: GemError,
    },
}

/// Mean loss terms over one epoch. `domain` is `None` for joint epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub domain: Option<usize>,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainCheckpoint {
    /// Last completed domain; `None` for the single joint checkpoint.
    pub after_domain: Option<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub order: Vec<usize>,
    pub losses: Vec<EpochLoss>,
    pub checkpoints: Vec<DomainCheckpoint>,
    pub model: Model,
    pub adam: Adam,
    pub steps: usize,
    /// Steps where at least one past-domain constraint was violated.
    pub projected_steps: usize,
    pub diagnostics: Vec<StepDiagnostics>,
    pub wall_clock_s: f64,
}

pub fn model_config(dataset: &Dataset) -> ModelConfig {
    ModelConfig::new(dataset.n, dataset.n, dataset.n_s)
}

/// Dispatches on `cfg.regime`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunRecord, TrainError> {
    match cfg.regime {
        Regime::Joint => train_joint(dataset, cfg),
        Regime::ContinualGem | Regime::Baseline => train_sequential(dataset, cfg, cfg.regime == Regime::ContinualGem),
    }
}

pub fn train_continual(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunRecord, TrainError> {
    train_sequential(dataset, cfg, true)
}

pub fn train_baseline(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunRecord, TrainError> {
    train_sequential(dataset, cfg, false)
}

/// Running row-weighted average of batch loss terms.
#[derive(Default)]
struct EpochMeter {
    rows: usize,
    sums: [f64; 4],
}

impl EpochMeter {
    fn add(&mut self, b: &LossBreakdown, rows: usize) {
        let w = rows as f64;
        self.sums[0] += w * b.recon;
        self.sums[1] += w * b.kl_c;
        self.sums[2] += w * b.kl_s;
        self.sums[3] += w * b.total;
        self.rows += rows;
    }

    fn finish(&self, weights: LossWeights) -> LossBreakdown {
        let n = self.rows.max(1) as f64;
        LossBreakdown {
            recon: self.sums[0] / n,
            kl_c: self.sums[1] / n,
            kl_s: self.sums[2] / n,
            total: self.sums[3] / n,
            alpha: weights.alpha,
            beta: weights.beta,
        }
    }
}

struct Stepper {
    model: Model,
    adam: Adam,
    weights: LossWeights,
    steps: usize,
}

impl Stepper {
    /// Loss, flat gradient and per-tensor connectivity of one batch.
    fn gradient(&self, x: &Tensor, domains: &[usize], rng: &mut RunRng) -> Result<(LossBreakdown, Vec<f64>, Vec<bool>), GradError> {
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g);
        let loss = elbo::total_loss(&mut g, &self.model, &vars, x, domains, self.weights, rng)?;
        let grads = g.backward(loss.total)?;
        let per: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let connected = vars.iter().map(|&v| grads.is_connected(v)).collect();
        Ok((loss.breakdown(&g), self.model.params.flatten(&per), connected))
    }

    /// Adam step on `flat`. Tensors outside the loss graph whose update is
    /// all zero (flows of domains absent from the batch) are skipped, so
    /// stale momentum does not move them.
    fn apply(&mut self, flat: &[f64], connected: &[bool]) -> Result<(), GradError> {
        let grads = self.model.params.unflatten(flat)?;
        let active: Vec<bool> = grads
            .iter()
            .zip(connected)
            .map(|(t, &c)| c || t.data().iter().any(|&x| x != 0.0))
            .collect();
        self.adam.step_active(&mut self.model.params, &grads, &active)?;
        self.steps += 1;
        Ok(())
    }
}

fn new_stepper(dataset: &Dataset, cfg: &TrainConfig) -> Stepper {
    let model = Model::new(model_config(dataset), &mut rng::stream(cfg.seed, "init"));
    let adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    Stepper {
        model,
        adam,
        weights: cfg.weights(),
        steps: 0,
    }
}

/// Sequential training over `order`; `use_gem` switches on the memory and
/// the projection.
///
/// The batch order, the loss noise, the memory reservoir and the
/// past-gradient noise come from separate streams, so a GEM run whose
/// projections are all no-ops follows the baseline trajectory exactly.
fn train_sequential(dataset: &Dataset, cfg: &TrainConfig, use_gem: bool) -> Result<RunRecord, TrainError> {
    let started = Instant::now();
    let order = cfg.resolve_order(&dataset.domains())?;
    let mut st = new_stepper(dataset, cfg);
    let mut batch_rng = rng::stream(cfg.seed, "batches");
    let mut noise_rng = rng::stream(cfg.seed, "loss-noise");
    let mut memory_rng = rng::stream(cfg.seed, "memory");
    let mut past_rng = rng::stream(cfg.seed, "past-noise");
    let mut bank = MemoryBank::new(cfg.memory);
    let opts = ProjectOptions {
        margin: cfg.margin,
        ..ProjectOptions::default()
    };
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut diagnostics = Vec::new();
    let mut projected_steps = 0;

    for (t, &u) in order.iter().enumerate() {
        st.model.ensure_domain(u);
        let data = &dataset.train_domain(u).expect("order checked against dataset").x;
        let past = &order[..t];
        for epoch in 0..cfg.epochs {
            let mut meter = EpochMeter::default();
            let perm = rng::permutation(&mut batch_rng, data.rows());
            for rows in perm.chunks(cfg.batch_size) {
                let step = st.steps;
                let ctx = |source: GemError| TrainError::Step {
                    domain: Some(u),
                    epoch,
                    step,
                    source,
                };
                let xb = data.select_rows(rows);
                // Each observation enters the reservoir once, during the
                // first pass over its domain.
                if use_gem && epoch == 0 {
                    bank.reservoir_update(u, &xb, &mut memory_rng);
                }
                let (loss, mut v, connected) = st
                    .gradient(&xb, &vec![u; rows.len()], &mut noise_rng)
                    .map_err(|e| ctx(e.into()))?;
                meter.add(&loss, rows.len());
                if use_gem && !past.is_empty() {
                    let b = gem::past_gradients(&st.model, &bank, past, st.weights, &mut past_rng).map_err(ctx)?;
                    let p = gem::project_with(&v, &b, opts).map_err(ctx)?;
                    if p.violated > 0 {
                        projected_steps += 1;
                    }
                    if cfg.diagnostics {
                        diagnostics.push(StepDiagnostics::new(st.steps, &v, &p));
                    }
                    v = p.v;
                }
                st.apply(&v, &connected).map_err(|e| ctx(e.into()))?;
            }
            let loss = meter.finish(st.weights);
            log::debug!(
                "{} seed {} domain {u} epoch {epoch}: total {:.4}",
                cfg.regime,
                cfg.seed,
                loss.total
            );
            losses.push(EpochLoss {
                domain: Some(u),
                epoch,
                loss,
            });
        }
        checkpoints.push(DomainCheckpoint {
            after_domain: Some(u),
            bytes: checkpoint::to_bytes(&st.model, Some(&st.adam)),
        });
        log::info!("{} seed {}: finished domain {u} ({}/{})", cfg.regime, cfg.seed, t + 1, order.len());
    }

    Ok(RunRecord {
        config: cfg.clone(),
        order,
        losses,
        checkpoints,
        model: st.model,
        adam: st.adam,
        steps: st.steps,
        projected_steps,
        diagnostics,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// One phase over the union of all domains; each row is routed through its
/// own domain's flow.
pub fn train_joint(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunRecord, TrainError> {
    let started = Instant::now();
    let order = cfg.resolve_order(&dataset.domains())?;
    let mut st = new_stepper(dataset, cfg);
    let mut batch_rng = rng::stream(cfg.seed, "batches");
    let mut noise_rng = rng::stream(cfg.seed, "loss-noise");
    for &u in &order {
        st.model.ensure_domain(u);
    }
    let mut rows_x: Vec<&[f64]> = Vec::new();
    let mut labels = Vec::new();
    for &u in &order {
        let x = &dataset.train_domain(u).expect("order checked against dataset").x;
        for r in 0..x.rows() {
            rows_x.push(x.row(r));
            labels.push(u);
        }
    }
    let cols = dataset.n;
    let epochs = match cfg.joint_budget {
        JointBudget::DomainsTimesEpochs => order.len() * cfg.epochs,
        JointBudget::SameSamples => cfg.epochs,
    };
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        let mut meter = EpochMeter::default();
        let perm = rng::permutation(&mut batch_rng, rows_x.len());
        for rows in perm.chunks(cfg.batch_size) {
            let step = st.steps;
            let ctx = |source: GemError| TrainError::Step {
                domain: None,
                epoch,
                step,
                source,
            };
            let mut data = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                data.extend_from_slice(rows_x[r]);
            }
            let xb = Tensor::matrix(rows.len(), cols, data).map_err(|e| ctx(e.into()))?;
            let lb: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let (loss, v, connected) = st.gradient(&xb, &lb, &mut noise_rng).map_err(|e| ctx(e.into()))?;
            meter.add(&loss, rows.len());
            st.apply(&v, &connected).map_err(|e| ctx(e.into()))?;
        }
        losses.push(EpochLoss {
            domain: None,
            epoch,
            loss: meter.finish(st.weights),
        });
    }
    let checkpoints = vec![DomainCheckpoint {
        after_domain: None,
        bytes: checkpoint::to_bytes(&st.model, Some(&st.adam)),
    }];
    Ok(RunRecord {
        config: cfg.clone(),
        order,
        losses,
        checkpoints,
        model: st.model,
        adam: st.adam,
        steps: st.steps,
        projected_steps: 0,
        diagnostics: Vec::new(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// CSV with columns `epoch,domain,recon,kl_c,kl_s,total`; joint epochs are
/// labelled `all`.
pub fn write_training_log(out: &mut impl Write, losses: &[EpochLoss]) -> std::io::Result<()> {
    writeln!(out, "epoch,domain,recon,kl_c,kl_s,total")?;
    for e in losses {
        let d = e.domain.map_or_else(|| "all".to_string(), |u| u.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, d, e.loss.recon, e.loss.kl_c, e.loss.kl_s, e.loss.total
        )?;
    }
    Ok(())
}

/// SHA-256 over the dataset's dimensions and the LE bytes of every train and
/// test observation and latent, in domain order.
pub fn dataset_hash(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((dataset.n as u64).to_le_bytes());
    h.update((dataset.n_s as u64).to_le_bytes());
    for part in [&dataset.train, &dataset.test] {
        for d in part {
            h.update((d.domain as u64).to_le_bytes());
            for t in [&d.x, &d.z] {
                h.update((t.rows() as u64).to_le_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub order: Vec<usize>,
    pub dataset_hash: String,
    pub steps: usize,
    pub projected_steps: usize,
    pub checkpoints: usize,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn manifest(&self, dataset: &Dataset) -> RunManifest {
        RunManifest {
            config: self.config.clone(),
            order: self.order.clone(),
            dataset_hash: dataset_hash(dataset),
            steps: self.steps,
            projected_steps: self.projected_steps,
            checkpoints: self.checkpoints.len(),
            wall_clock_s: self.wall_clock_s,
        }
    }
}
