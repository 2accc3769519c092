use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ccica::experiment::{self, ExperimentConfig, Scenario};
use ccica::identcheck::{self, MatrixKind};
use ccica::io;
use ccica::mcc::RegressionConfig;
use ccica::nets::checkpoint;
use ccica::rng;
use ccica::synthgen::{self, GenerationConfig, LatentFamily, SpecFile};
use ccica::trainer::{self, Regime, TrainConfig};

/// Continual nonlinear ICA on synthetic multi-domain data.
#[derive(Parser)]
#[command(name = "ccica", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (data.csv + data.json).
    Generate(GenerateArgs),
    /// Train one regime on a dataset.
    Train(TrainArgs),
    /// MCC of a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Rank audit of the identifiability matrices.
    IdentCheck(IdentArgs),
    /// Run a full regimes x seeds matrix for a scenario.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generation config (JSON); defaults to n=4, n_s=2, 5 domains.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment scenario whose preset and domain structure to use.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Pinned per-domain specs (JSON).
    #[arg(long)]
    specs: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or its data.json.
    #[arg(long)]
    data: PathBuf,
    /// Training config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Seed of the regression split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write eval.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IdentArgs {
    /// Spec file (JSON) to audit.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario: repeated-partial, repeated-partial-relaxed or random.
    #[arg(long)]
    scenario: Option<String>,
    /// lemma1 or theorem1; both when omitted.
    #[arg(long)]
    matrix: Option<MatrixKind>,
    #[arg(long, default_value_t = identcheck::DEFAULT_POINTS)]
    points: usize,
    /// Index of the reference domain in the spec list.
    #[arg(long, default_value_t = 0)]
    reference: usize,
    /// Changing latents for the random scenario.
    #[arg(long, default_value_t = 2)]
    n_s: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write ident_report.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON); defaults to the scenario preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Run only this regime.
    #[arg(long)]
    regime: Option<Regime>,
    /// Worker threads (0 = logical cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let preset = a.scenario.map(ExperimentConfig::preset);
    let mut cfg = match (&a.config, &preset) {
        (Some(p), _) => read_json::<GenerationConfig>(p)?,
        (None, Some(e)) => e.generation.clone(),
        (None, None) => GenerationConfig::standard(4, 2, 5, LatentFamily::Gaussian, 0),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let generated = match (&a.specs, preset) {
        (Some(_), Some(_)) => bail!("--specs and --scenario are mutually exclusive"),
        (Some(p), None) => {
            let file: SpecFile = read_json(p)?;
            file.validate()?;
            if file.n_s != cfg.n_s {
                bail!("{}: n_s = {}, config has n_s = {}", p.display(), file.n_s, cfg.n_s);
            }
            cfg.domains = file.domains.len();
            synthgen::generate_with_specs(&cfg, file.domains)?
        }
        (None, Some(mut e)) => {
            e.generation = cfg.clone();
            e.validate()?;
            experiment::scenario_data(&e, cfg.seed)?
        }
        (None, None) => synthgen::generate(&cfg)?,
    };
    let hash = io::write_dataset(&a.out, &generated)?;
    println!("{hash}");
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (_, dataset) = io::read_dataset(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(r) = a.regime {
        cfg.regime = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let record = trainer::train(&dataset, &cfg)?;
    let ck_dir = a.out.join("checkpoints");
    fs::create_dir_all(&ck_dir).with_context(|| format!("creating {}", ck_dir.display()))?;
    for (k, ck) in record.checkpoints.iter().enumerate() {
        let name = match ck.after_domain {
            Some(u) => format!("{:02}-domain{u}.ckpt", k + 1),
            None => "joint.ckpt".to_string(),
        };
        fs::write(ck_dir.join(name), &ck.bytes)?;
    }
    let mut log = BufWriter::new(fs::File::create(a.out.join("training_log.csv"))?);
    trainer::write_training_log(&mut log, &record.losses)?;
    if cfg.diagnostics {
        let mut d = BufWriter::new(fs::File::create(a.out.join("diagnostics.csv"))?);
        ccica::gem::write_diagnostics(&mut d, &record.diagnostics)?;
    }
    write_json(&a.out.join("manifest.json"), &record.manifest(&dataset))?;
    println!(
        "{}: {} steps ({} projected), {} checkpoints, final loss {:.6}",
        cfg.regime,
        record.steps,
        record.projected_steps,
        record.checkpoints.len(),
        record.losses.last().map_or(f64::NAN, |l| l.loss.total)
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (_, dataset) = io::read_dataset(&a.data)?;
    let bytes = fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let (model, _) = checkpoint::from_bytes(&bytes)?;
    if model.config.x_dim != dataset.n || model.config.n_s != dataset.n_s {
        bail!(
            "checkpoint is for n = {}, n_s = {}; dataset has n = {}, n_s = {}",
            model.config.x_dim,
            model.config.n_s,
            dataset.n,
            dataset.n_s
        );
    }
    let reg = RegressionConfig {
        seed: a.seed,
        ..RegressionConfig::default()
    };
    let ev = experiment::evaluate(&model, &dataset, model.flows().len(), &reg)?;
    println!("MCC {:.4}", ev.mcc);
    for i in 0..ev.per_latent.len() {
        println!(
            "z_s{}  corr {:.4}  raw {:.4}  estimate {}{}",
            i + 1,
            ev.per_latent[i],
            ev.raw_per_latent[i],
            ev.assignment[i] + 1,
            if ev.fallback[i] { "  (raw fallback)" } else { "" }
        );
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("eval.json"), &ev)?;
    }
    Ok(())
}

fn ident_check(a: IdentArgs) -> Result<()> {
    let specs = match (&a.config, a.scenario.as_deref()) {
        (Some(_), Some(_)) => bail!("--config and --scenario are mutually exclusive"),
        (Some(p), None) => {
            let f: SpecFile = read_json(p)?;
            f.validate()?;
            f.domains
        }
        (None, Some("repeated-partial")) => identcheck::repeated_partial(),
        (None, Some("repeated-partial-relaxed")) => identcheck::repeated_partial_relaxed(),
        (None, Some("random")) | (None, None) => {
            let mut g = GenerationConfig::standard(a.n_s.max(1), a.n_s, 2 * a.n_s + 1, LatentFamily::Gaussian, a.seed);
            g.n = a.n_s;
            g.validate()?;
            synthgen::sample_domain_specs(&g, &mut rng::stream(a.seed, "ident-specs"))
        }
        (None, Some(other)) => {
            bail!("unknown ident-check scenario '{other}' (expected repeated-partial, repeated-partial-relaxed or random)")
        }
    };
    let kinds = match a.matrix {
        Some(k) => vec![k],
        None => vec![MatrixKind::Theorem1, MatrixKind::Lemma1],
    };
    let mut reports = Vec::new();
    for kind in kinds {
        let mut r = rng::stream(a.seed, &format!("ident-points/{kind}"));
        let report = identcheck::check_scenario(&specs, kind, a.reference, a.points, &mut r)?;
        print!("{}", report.to_table());
        println!();
        reports.push(report);
    }
    let audit = identcheck::minimal_change_audit(&specs);
    for l in &audit {
        println!(
            "z_s{}: {} distinct distributions{}",
            l.latent + 1,
            l.distinct,
            if l.flagged { "  (fewer than 3)" } else { "" }
        );
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_json(
            &out.join("ident_report.json"),
            &serde_json::json!({ "specs": specs, "reports": reports, "audit": audit }),
        )?;
    }
    Ok(())
}

fn run_experiment(a: ExperimentArgs) -> Result<bool> {
    let mut cfg = match (&a.config, a.scenario) {
        (Some(p), s) => {
            let mut c = ExperimentConfig::load(p)?;
            if let Some(s) = s {
                c.scenario = s;
            }
            c
        }
        (None, Some(s)) => ExperimentConfig::preset(s),
        (None, None) => ExperimentConfig::preset(Scenario::Default),
    };
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(r) = a.regime {
        cfg.regimes = vec![r];
    }
    let outcome = experiment::run(&cfg, a.jobs)?;
    outcome.write(&a.out)?;
    println!("regime          domains  mean MCC   std      n");
    for g in &outcome.aggregates {
        println!(
            "{:<15} {:>7}  {:.4}     {:.4}   {}",
            g.regime.as_str(),
            g.train_domains,
            g.mean,
            g.std,
            g.count
        );
    }
    for f in &outcome.failures {
        eprintln!("failed: {} seed {}: {}", f.regime, f.seed, f.error);
    }
    println!("results written to {}", a.out.display());
    Ok(outcome.succeeded())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CCICA_LOG", "warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::IdentCheck(a) => ident_check(a).map(|_| true),
        Command::Experiment(a) => run_experiment(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
