//! Synthetic multi-domain data: domain-conditioned latents pushed through an
//! invertible two-layer leaky-ReLU mixing.
//!
//! Latent layout is `[z_c, z_s]`: the first `n - n_s` coordinates are
//! invariant across domains, the last `n_s` change with the domain.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::ndgrad::Tensor;
use crate::rng::{self, RunRng};

/// Mean of the equal-weight mixture of N(0,1) and N(0.25,1).
pub const MIXTURE_MEAN: f64 = 0.125;
/// Variance of that mixture: 1 + 0.25^2 / 4.
pub const MIXTURE_VARIANCE: f64 = 1.015625;
pub const MIXTURE_OFFSET: f64 = 0.25;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("no mixing matrix with condition number below {bound} after {tries} draws")]
    Conditioning { bound: f64, tries: usize },
    #[error("domain spec {domain} has {got} changing latents, expected {expected}")]
    SpecShape { domain: usize, got: usize, expected: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LatentFamily {
    #[default]
    Gaussian,
    MixedGaussian,
}

/// How the two base Gaussians of the mixed family are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    /// Equal-weight two-component mixture (non-Gaussian).
    #[default]
    Mixture,
    /// Sum of the two draws (Gaussian again); kept for comparison.
    Sum,
}

/// Distribution of one changing latent in one domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LatentDist {
    Gaussian {
        mean: f64,
        variance: f64,
    },
    MixedGaussian {
        scale: f64,
        translation: f64,
        #[serde(default)]
        combine: Combine,
    },
}

impl LatentDist {
    pub fn validate(&self) -> Result<(), GenError> {
        match *self {
            LatentDist::Gaussian { mean, variance } if mean.is_finite() && variance > 0.0 && variance.is_finite() => Ok(()),
            LatentDist::MixedGaussian { scale, translation, .. }
                if scale > 0.0 && scale.is_finite() && translation.is_finite() =>
            {
                Ok(())
            }
            other => Err(GenError::Config(format!("invalid latent distribution {:?}", other))),
        }
    }

    /// Population mean and variance.
    pub fn moments(&self) -> (f64, f64) {
        match *self {
            LatentDist::Gaussian { mean, variance } => (mean, variance),
            LatentDist::MixedGaussian { scale, translation, .. } => (translation, scale * scale),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            LatentDist::Gaussian { mean, variance } => mean + variance.sqrt() * rng::normal(rng),
            LatentDist::MixedGaussian {
                scale,
                translation,
                combine,
            } => standardized_base(combine, rng) * scale + translation,
        }
    }
}

/// A zero-mean, unit-variance draw from the mixed family's base variable.
pub fn standardized_base(combine: Combine, rng: &mut impl Rng) -> f64 {
    match combine {
        Combine::Mixture => {
            let offset = if rng.random::<bool>() { MIXTURE_OFFSET } else { 0.0 };
            let raw = offset + rng::normal(rng);
            (raw - MIXTURE_MEAN) / MIXTURE_VARIANCE.sqrt()
        }
        Combine::Sum => {
            let raw = rng::normal(rng) + MIXTURE_OFFSET + rng::normal(rng);
            (raw - MIXTURE_OFFSET) / 2.0_f64.sqrt()
        }
    }
}

/// Parameters of `p(z_s | u)` for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: usize,
    pub changing: Vec<LatentDist>,
}

/// Pinned per-domain specs, shared by the generator and the identifiability
/// checker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecFile {
    #[serde(default)]
    pub name: String,
    pub n_s: usize,
    pub domains: Vec<DomainSpec>,
}

impl SpecFile {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.domains.is_empty() {
            return Err(GenError::Config("spec file lists no domains".into()));
        }
        for s in &self.domains {
            if s.changing.len() != self.n_s {
                return Err(GenError::SpecShape {
                    domain: s.domain,
                    got: s.changing.len(),
                    expected: self.n_s,
                });
            }
            for d in &s.changing {
                d.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Total latent (and observed) dimension.
    pub n: usize,
    /// Number of changing latents.
    pub n_s: usize,
    pub domains: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub seed: u64,
    #[serde(default)]
    pub family: LatentFamily,
    #[serde(default)]
    pub combine: Combine,
    #[serde(default = "default_slope")]
    pub mixing_slope: f64,
    #[serde(default = "default_cond_bound")]
    pub condition_bound: f64,
}

fn default_slope() -> f64 {
    0.2
}

fn default_cond_bound() -> f64 {
    1e3
}

impl GenerationConfig {
    /// Sample counts used for the two standard problem sizes:
    /// 10000/1000 per domain for `n = 4`, 5000/1000 otherwise.
    pub fn standard(n: usize, n_s: usize, domains: usize, family: LatentFamily, seed: u64) -> Self {
        let train = if n <= 4 { 10_000 } else { 5_000 };
        Self {
            n,
            n_s,
            domains,
            train_per_domain: train,
            test_per_domain: 1_000,
            seed,
            family,
            combine: Combine::Mixture,
            mixing_slope: default_slope(),
            condition_bound: default_cond_bound(),
        }
    }

    pub fn n_c(&self) -> usize {
        self.n - self.n_s
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let mut errs = Vec::new();
        if self.n_s < 1 {
            errs.push("n_s must be at least 1".to_string());
        }
        if self.n_s > self.n {
            errs.push(format!("n_s ({}) must not exceed n ({})", self.n_s, self.n));
        }
        if self.domains < 1 {
            errs.push("domains must be at least 1".to_string());
        }
        if self.train_per_domain == 0 || self.test_per_domain == 0 {
            errs.push("sample counts must be positive".to_string());
        }
        if !(self.mixing_slope > 0.0) {
            errs.push("mixing_slope must be positive".to_string());
        }
        if !(self.condition_bound > 1.0) {
            errs.push("condition_bound must exceed 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(GenError::Config(errs.join("; ")))
        }
    }
}

/// Draws one changing-latent distribution: Gaussian mean ~ U(-4,4),
/// variance ~ U(0.01,1); mixed scale ~ U(0.01,1), translation ~ U(-4,4).
pub fn sample_dist(family: LatentFamily, combine: Combine, rng: &mut impl Rng) -> LatentDist {
    match family {
        LatentFamily::Gaussian => LatentDist::Gaussian {
            mean: rng.random_range(-4.0..4.0),
            variance: rng.random_range(0.01..1.0),
        },
        LatentFamily::MixedGaussian => LatentDist::MixedGaussian {
            scale: rng.random_range(0.01..1.0),
            translation: rng.random_range(-4.0..4.0),
            combine,
        },
    }
}

/// Independent [`sample_dist`] draws for every domain and changing latent.
pub fn sample_domain_specs(cfg: &GenerationConfig, rng: &mut impl Rng) -> Vec<DomainSpec> {
    (0..cfg.domains)
        .map(|domain| {
            let changing = (0..cfg.n_s).map(|_| sample_dist(cfg.family, cfg.combine, rng)).collect();
            DomainSpec { domain, changing }
        })
        .collect()
}

/// Draws `count` latent rows `[z_c, z_s]` for one domain.
pub fn sample_latents(spec: &DomainSpec, cfg: &GenerationConfig, count: usize, rng: &mut impl Rng) -> Result<Tensor, GenError> {
    if spec.changing.len() != cfg.n_s {
        return Err(GenError::SpecShape {
            domain: spec.domain,
            got: spec.changing.len(),
            expected: cfg.n_s,
        });
    }
    let n_c = cfg.n_c();
    let mut data = Vec::with_capacity(count * cfg.n);
    for _ in 0..count {
        for _ in 0..n_c {
            let v = match cfg.family {
                LatentFamily::Gaussian => rng::normal(rng),
                LatentFamily::MixedGaussian => standardized_base(cfg.combine, rng),
            };
            data.push(v);
        }
        for dist in &spec.changing {
            data.push(dist.sample(rng));
        }
    }
    Ok(Tensor::matrix(count, cfg.n, data).expect("consistent shape"))
}

/// `x = W2 · leaky_relu(W1 · z)` with square, well-conditioned weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingFunction {
    pub n: usize,
    pub slope: f64,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl MixingFunction {
    pub fn apply_row(&self, z: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .w1
            .matvec(z)
            .into_iter()
            .map(|v| if v >= 0.0 { v } else { self.slope * v })
            .collect();
        self.w2.matvec(&h)
    }

    pub fn apply(&self, z: &Tensor) -> Tensor {
        let mut data = Vec::with_capacity(z.len());
        for r in 0..z.rows() {
            data.extend(self.apply_row(z.row(r)));
        }
        Tensor::matrix(z.rows(), self.n, data).expect("consistent shape")
    }

    /// Layer-wise inverse.
    pub fn inverter(&self) -> Result<MixingInverse, GenError> {
        Ok(MixingInverse {
            w1_inv: linalg::inverse(&self.w1)?,
            w2_inv: linalg::inverse(&self.w2)?,
            slope: self.slope,
        })
    }
}

pub struct MixingInverse {
    w1_inv: Matrix,
    w2_inv: Matrix,
    slope: f64,
}

impl MixingInverse {
    pub fn invert_row(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .w2_inv
            .matvec(x)
            .into_iter()
            .map(|v| if v >= 0.0 { v } else { v / self.slope })
            .collect();
        self.w1_inv.matvec(&h)
    }
}

const MAX_MIXING_DRAWS: usize = 100;

/// Draws both mixing layers with entries ~ N(0, 1/n), redrawing any layer
/// whose condition number is not below the configured bound.
pub fn build_mixing<R: Rng>(cfg: &GenerationConfig, rng: &mut R) -> Result<MixingFunction, GenError> {
    let n = cfg.n;
    let draw = |rng: &mut R| -> Result<Matrix, GenError> {
        let sd = (1.0 / n as f64).sqrt();
        for _ in 0..MAX_MIXING_DRAWS {
            let data: Vec<f64> = (0..n * n).map(|_| sd * rng::normal(rng)).collect();
            let m = Matrix { rows: n, cols: n, data };
            if linalg::svd(&m)?.condition_number() < cfg.condition_bound {
                return Ok(m);
            }
        }
        Err(GenError::Conditioning {
            bound: cfg.condition_bound,
            tries: MAX_MIXING_DRAWS,
        })
    };
    let w1 = draw(rng)?;
    let w2 = draw(rng)?;
    Ok(MixingFunction {
        n,
        slope: cfg.mixing_slope,
        w1,
        w2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Observations of one domain with their ground-truth latents.
///
/// `z` is carried for evaluation only; training code reads `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub domain: usize,
    pub x: Tensor,
    pub z: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub n_s: usize,
    pub train: Vec<DomainData>,
    pub test: Vec<DomainData>,
}

impl Dataset {
    pub fn domains(&self) -> Vec<usize> {
        self.train.iter().map(|d| d.domain).collect()
    }

    pub fn train_domain(&self, domain: usize) -> Option<&DomainData> {
        self.train.iter().find(|d| d.domain == domain)
    }

    /// Keeps only the listed domains (in the given order).
    pub fn restrict(&self, domains: &[usize]) -> Dataset {
        let pick = |part: &[DomainData]| {
            domains
                .iter()
                .filter_map(|u| part.iter().find(|d| d.domain == *u).cloned())
                .collect()
        };
        Dataset {
            n: self.n,
            n_s: self.n_s,
            train: pick(&self.train),
            test: pick(&self.test),
        }
    }

    /// Stacks the test split of the given domains.
    pub fn stacked_test(&self, domains: &[usize]) -> (Tensor, Tensor) {
        stack(self.test.iter().filter(|d| domains.contains(&d.domain)))
    }
}

pub(crate) fn stack<'a>(parts: impl Iterator<Item = &'a DomainData>) -> (Tensor, Tensor) {
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for d in parts {
        rows += d.x.rows();
        cols = d.x.cols();
        xs.extend_from_slice(d.x.data());
        zs.extend_from_slice(d.z.data());
    }
    (
        Tensor::matrix(rows, cols, xs).expect("stack x"),
        Tensor::matrix(rows, cols, zs).expect("stack z"),
    )
}

/// Everything needed to reproduce or audit a generated dataset.
#[derive(Clone, Debug)]
pub struct Generated {
    pub config: GenerationConfig,
    pub dataset: Dataset,
    pub specs: Vec<DomainSpec>,
    pub mixing: MixingFunction,
}

/// Full generation from a config and its seed.
pub fn generate(cfg: &GenerationConfig) -> Result<Generated, GenError> {
    cfg.validate()?;
    let specs = sample_domain_specs(cfg, &mut rng::stream(cfg.seed, "domain-specs"));
    generate_with_specs(cfg, specs)
}

/// Generation from pinned per-domain specs (scenario files).
pub fn generate_with_specs(cfg: &GenerationConfig, specs: Vec<DomainSpec>) -> Result<Generated, GenError> {
    cfg.validate()?;
    for s in &specs {
        if s.changing.len() != cfg.n_s {
            return Err(GenError::SpecShape {
                domain: s.domain,
                got: s.changing.len(),
                expected: cfg.n_s,
            });
        }
        for d in &s.changing {
            d.validate()?;
        }
    }
    let mixing = build_mixing(cfg, &mut rng::stream(cfg.seed, "mixing"))?;
    let mut train = Vec::with_capacity(specs.len());
    let mut test = Vec::with_capacity(specs.len());
    for spec in &specs {
        for (split, count, out) in [
            (Split::Train, cfg.train_per_domain, &mut train),
            (Split::Test, cfg.test_per_domain, &mut test),
        ] {
            let mut r: RunRng = rng::stream(cfg.seed, &format!("latents/{}/{}", spec.domain, split.as_str()));
            let z = sample_latents(spec, cfg, count, &mut r)?;
            let x = mixing.apply(&z);
            out.push(DomainData {
                domain: spec.domain,
                x,
                z,
            });
        }
    }
    Ok(Generated {
        config: cfg.clone(),
        dataset: Dataset {
            n: cfg.n,
            n_s: cfg.n_s,
            train,
            test,
        },
        specs,
        mixing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(domains: usize, n: usize, n_s: usize) -> GenerationConfig {
        GenerationConfig {
            train_per_domain: 200,
            test_per_domain: 50,
            ..GenerationConfig::standard(n, n_s, domains, LatentFamily::Gaussian, 11)
        }
    }

    fn col_moments(t: &Tensor, c: usize) -> (f64, f64) {
        let n = t.rows() as f64;
        let mean = (0..t.rows()).map(|r| t.at(r, c)).sum::<f64>() / n;
        let var = (0..t.rows()).map(|r| (t.at(r, c) - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn specs_stay_in_range() {
        for (domains, n_s) in [(1, 2), (9, 4)] {
            let cfg = small(domains, 8, n_s);
            let specs = sample_domain_specs(&cfg, &mut rng::seeded(1));
            assert_eq!(specs.len(), domains);
            for s in &specs {
                assert_eq!(s.changing.len(), n_s);
                for d in &s.changing {
                    let LatentDist::Gaussian { mean, variance } = *d else { panic!() };
                    assert!((-4.0..=4.0).contains(&mean));
                    assert!((0.01..=1.0).contains(&variance));
                }
            }
        }
        let mut cfg = small(5, 4, 2);
        cfg.family = LatentFamily::MixedGaussian;
        for s in sample_domain_specs(&cfg, &mut rng::seeded(2)) {
            for d in s.changing {
                let LatentDist::MixedGaussian { scale, translation, .. } = d else { panic!() };
                assert!((0.01..=1.0).contains(&scale));
                assert!((-4.0..=4.0).contains(&translation));
            }
        }
    }

    #[test]
    fn specs_are_seed_deterministic() {
        let cfg = small(4, 4, 2);
        assert_eq!(
            sample_domain_specs(&cfg, &mut rng::seeded(5)),
            sample_domain_specs(&cfg, &mut rng::seeded(5))
        );
    }

    #[test]
    fn gaussian_latent_moments() {
        let cfg = small(1, 4, 2);
        let spec = DomainSpec {
            domain: 0,
            changing: vec![LatentDist::Gaussian { mean: 0.0, variance: 1.0 }; 2],
        };
        let z = sample_latents(&spec, &cfg, 100_000, &mut rng::seeded(9)).unwrap();
        let (m, v) = col_moments(&z, 3);
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((v - 1.0).abs() < 0.05, "var {v}");
    }

    #[test]
    fn invariant_latents_match_across_domains() {
        let cfg = small(2, 4, 2);
        let specs = sample_domain_specs(&cfg, &mut rng::seeded(3));
        let a = sample_latents(&specs[0], &cfg, 100_000, &mut rng::seeded(4)).unwrap();
        let b = sample_latents(&specs[1], &cfg, 100_000, &mut rng::seeded(5)).unwrap();
        for c in 0..cfg.n_c() {
            let (ma, _) = col_moments(&a, c);
            let (mb, _) = col_moments(&b, c);
            assert!((ma - mb).abs() < 0.05);
        }
    }

    #[test]
    fn mixture_standardization() {
        let mut r = rng::seeded(8);
        let n = 200_000;
        let raw: Vec<f64> = (0..n)
            .map(|_| {
                let off = if r.random::<bool>() { MIXTURE_OFFSET } else { 0.0 };
                off + rng::normal(&mut r)
            })
            .collect();
        let m = raw.iter().sum::<f64>() / n as f64;
        let v = raw.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m - MIXTURE_MEAN).abs() < 0.01);
        assert!((v - MIXTURE_VARIANCE).abs() < 0.02);

        let std: Vec<f64> = (0..n).map(|_| standardized_base(Combine::Mixture, &mut r)).collect();
        let m = std.iter().sum::<f64>() / n as f64;
        let v = std.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.01 && (v - 1.0).abs() < 0.02);
    }

    #[test]
    fn mixing_is_well_conditioned_and_invertible() {
        let cfg = small(1, 4, 2);
        let mix = build_mixing(&cfg, &mut rng::seeded(21)).unwrap();
        assert_eq!((mix.w1.rows, mix.w1.cols), (4, 4));
        assert_eq!((mix.w2.rows, mix.w2.cols), (4, 4));
        assert!(linalg::svd(&mix.w1).unwrap().condition_number() < 1e3);
        assert!(linalg::svd(&mix.w2).unwrap().condition_number() < 1e3);
        let inv = mix.inverter().unwrap();
        let mut r = rng::seeded(22);
        for _ in 0..1000 {
            let z = rng::normals(&mut r, 4);
            let back = inv.invert_row(&mix.apply_row(&z));
            let err = z.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn impossible_condition_bound_fails() {
        let mut cfg = small(1, 4, 2);
        cfg.condition_bound = 1.000_000_1;
        assert!(matches!(
            build_mixing(&cfg, &mut rng::seeded(1)),
            Err(GenError::Conditioning { .. })
        ));
    }

    #[test]
    fn generate_defaults_and_determinism() {
        let cfg = GenerationConfig::standard(4, 2, 2, LatentFamily::Gaussian, 3);
        let g = generate(&cfg).unwrap();
        assert_eq!(g.dataset.train.len(), 2);
        assert_eq!(g.dataset.train[0].x.rows(), 10_000);
        assert_eq!(g.dataset.test[0].x.rows(), 1_000);
        let again = generate(&cfg).unwrap();
        assert_eq!(g.dataset, again.dataset);
        for d in &g.dataset.train {
            for r in 0..d.x.rows() {
                assert_ne!(d.x.row(r), d.z.row(r));
            }
        }
        assert_eq!(GenerationConfig::standard(8, 4, 1, LatentFamily::Gaussian, 0).train_per_domain, 5_000);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(1, 4, 2);
        cfg.n_s = 5;
        assert!(generate(&cfg).is_err());
        cfg.n_s = 0;
        assert!(cfg.validate().is_err());
    }
}
