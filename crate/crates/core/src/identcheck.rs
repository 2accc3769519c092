//! Numerical identifiability audit: builds the component-wise (`2 n_s` square)
//! and subspace (`n_s` square) matrices of log-density derivative differences
//! from domain specs and checks their rank.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::synthgen::{Combine, DomainSpec, LatentDist, MIXTURE_MEAN, MIXTURE_OFFSET, MIXTURE_VARIANCE};

/// Singular values at or below `RANK_TOL * sigma_max` count as zero.
pub const RANK_TOL: f64 = 1e-8;
/// Columns with `|cos| > DEPENDENCY_COS` are reported as dependent.
pub const DEPENDENCY_COS: f64 = 0.999;
pub const DEFAULT_POINTS: usize = 200;

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("{kind} matrix needs {needed} domains including the reference, got {got}")]
    InsufficientDomains { kind: MatrixKind, needed: usize, got: usize },
    #[error("domain {domain} has {got} changing latents, expected {expected}")]
    SpecShape { domain: usize, got: usize, expected: usize },
    #[error("evaluation point has {got} coordinates, expected {expected}")]
    PointShape { got: usize, expected: usize },
    #[error("reference domain index {0} out of range")]
    Reference(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixKind {
    /// `[phi''_1..phi''_ns, phi'_1..phi'_ns]` over `2 n_s` domains.
    Lemma1,
    /// `[phi'_1..phi'_ns]` over `n_s` domains.
    Theorem1,
}

impl MatrixKind {
    pub fn domains_needed(self, n_s: usize) -> usize {
        match self {
            MatrixKind::Lemma1 => 2 * n_s + 1,
            MatrixKind::Theorem1 => n_s + 1,
        }
    }

    pub fn columns(self, n_s: usize) -> usize {
        match self {
            MatrixKind::Lemma1 => 2 * n_s,
            MatrixKind::Theorem1 => n_s,
        }
    }
}

impl std::fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatrixKind::Lemma1 => "lemma1",
            MatrixKind::Theorem1 => "theorem1",
        })
    }
}

impl std::str::FromStr for MatrixKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lemma1" | "component" => Ok(MatrixKind::Lemma1),
            "theorem1" | "subspace" => Ok(MatrixKind::Theorem1),
            other => Err(format!("unknown matrix kind '{other}' (lemma1, theorem1)")),
        }
    }
}

fn normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Mixed-family latent `z = a (m - MIXTURE_MEAN) + t` with base mixture `m`.
fn mixture_parts(scale: f64, translation: f64, z: f64) -> (f64, f64) {
    let a = scale / MIXTURE_VARIANCE.sqrt();
    (a, (z - translation) / a + MIXTURE_MEAN)
}

/// Log-density of one latent's distribution.
pub fn log_density(dist: &LatentDist, z: f64) -> f64 {
    match *dist {
        LatentDist::Gaussian { mean, variance } => normal_log_pdf((z - mean) / variance.sqrt()) - 0.5 * variance.ln(),
        LatentDist::MixedGaussian {
            scale,
            translation,
            combine: Combine::Sum,
        } => normal_log_pdf((z - translation) / scale) - scale.ln(),
        LatentDist::MixedGaussian {
            scale,
            translation,
            combine: Combine::Mixture,
        } => {
            let (a, m) = mixture_parts(scale, translation, z);
            let l0 = normal_log_pdf(m);
            let l1 = normal_log_pdf(m - MIXTURE_OFFSET);
            let hi = l0.max(l1);
            hi + (0.5 * (l0 - hi).exp() + 0.5 * (l1 - hi).exp()).ln() - a.ln()
        }
    }
}

/// First and second derivative of `log p(z)`.
pub fn log_density_derivs(dist: &LatentDist, z: f64) -> (f64, f64) {
    match *dist {
        LatentDist::Gaussian { mean, variance } => (-(z - mean) / variance, -1.0 / variance),
        LatentDist::MixedGaussian {
            scale,
            translation,
            combine: Combine::Sum,
        } => {
            let v = scale * scale;
            (-(z - translation) / v, -1.0 / v)
        }
        LatentDist::MixedGaussian {
            scale,
            translation,
            combine: Combine::Mixture,
        } => {
            let (a, m) = mixture_parts(scale, translation, z);
            let (e0, e1) = (m, m - MIXTURE_OFFSET);
            // Responsibilities of the two equal-weight components.
            let r1 = 1.0 / (1.0 + (-0.5 * e0 * e0 + 0.5 * e1 * e1).exp());
            let r0 = 1.0 - r1;
            let d1 = -(r0 * e0 + r1 * e1);
            let d2 = r0 * e0 * e0 + r1 * e1 * e1 - 1.0 - d1 * d1;
            (d1 / a, d2 / (a * a))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentMatrix {
    pub kind: MatrixKind,
    pub z_s: Vec<f64>,
    /// Domain label of the reference domain.
    pub u0: usize,
    /// Domain labels of the rows, in order.
    pub rows: Vec<usize>,
    pub entries: Matrix,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

impl IdentMatrix {
    pub fn full_rank(&self) -> bool {
        self.rank == self.entries.cols
    }
}

fn check_shapes(specs: &[DomainSpec], z_s: &[f64]) -> Result<usize, IdentError> {
    let n_s = z_s.len();
    for s in specs {
        if s.changing.len() != n_s {
            return Err(IdentError::SpecShape {
                domain: s.domain,
                got: s.changing.len(),
                expected: n_s,
            });
        }
    }
    Ok(n_s)
}

/// Difference rows `phi(u_k) - phi(u0)` for every listed domain.
fn difference_rows(kind: MatrixKind, reference: &DomainSpec, others: &[&DomainSpec], z_s: &[f64]) -> Matrix {
    let n_s = z_s.len();
    let cols = kind.columns(n_s);
    let base: Vec<(f64, f64)> = (0..n_s).map(|i| log_density_derivs(&reference.changing[i], z_s[i])).collect();
    let mut m = Matrix::zeros(others.len(), cols);
    for (k, spec) in others.iter().enumerate() {
        for i in 0..n_s {
            let (d1, d2) = log_density_derivs(&spec.changing[i], z_s[i]);
            match kind {
                MatrixKind::Lemma1 => {
                    m[(k, i)] = d2 - base[i].1;
                    m[(k, n_s + i)] = d1 - base[i].0;
                }
                MatrixKind::Theorem1 => m[(k, i)] = d1 - base[i].0,
            }
        }
    }
    m
}

/// Builds the matrix at `z_s` using `specs[u0]` as reference and the next
/// domains in list order (skipping the reference) as rows.
pub fn build_matrix(specs: &[DomainSpec], kind: MatrixKind, z_s: &[f64], u0: usize) -> Result<IdentMatrix, IdentError> {
    let n_s = check_shapes(specs, z_s)?;
    let reference = specs.get(u0).ok_or(IdentError::Reference(u0))?;
    let needed = kind.domains_needed(n_s);
    if specs.len() < needed {
        return Err(IdentError::InsufficientDomains {
            kind,
            needed,
            got: specs.len(),
        });
    }
    let others: Vec<&DomainSpec> = specs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != u0)
        .map(|(_, s)| s)
        .take(needed - 1)
        .collect();
    let entries = difference_rows(kind, reference, &others, z_s);
    let svd = linalg::svd(&entries)?;
    Ok(IdentMatrix {
        kind,
        z_s: z_s.to_vec(),
        u0: reference.domain,
        rows: others.iter().map(|s| s.domain).collect(),
        rank: svd.rank(RANK_TOL),
        singular_values: svd.values,
        entries,
    })
}

/// Pairs of columns (1-based) whose absolute cosine exceeds the threshold,
/// and columns that vanish entirely (also 1-based). A vanishing column is
/// dependent on every other column.
pub fn column_dependencies(m: &Matrix) -> (Vec<(usize, usize)>, Vec<usize>) {
    let cols: Vec<Vec<f64>> = (0..m.cols).map(|j| m.column(j)).collect();
    let norms: Vec<f64> = cols.iter().map(|c| linalg::norm(c)).collect();
    let top = norms.iter().copied().fold(0.0, f64::max);
    let zero: Vec<bool> = norms.iter().map(|&n| n <= 1e-12 * top.max(f64::MIN_POSITIVE)).collect();
    let mut pairs = Vec::new();
    for i in 0..m.cols {
        for j in (i + 1)..m.cols {
            if zero[i] || zero[j] {
                pairs.push((i + 1, j + 1));
                continue;
            }
            let cos = linalg::dot(&cols[i], &cols[j]) / (norms[i] * norms[j]);
            if cos.abs() > DEPENDENCY_COS {
                pairs.push((i + 1, j + 1));
            }
        }
    }
    let zeros = (0..m.cols).filter(|&j| zero[j]).map(|j| j + 1).collect();
    (pairs, zeros)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointResult {
    pub z_s: Vec<f64>,
    pub min_singular: f64,
    pub max_singular: f64,
    pub rank: usize,
    /// Full rank with the fixed domain set.
    pub full_rank: bool,
    /// Some choice of domains from the whole list gives full rank here.
    pub exists_full_rank: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DependencyCount {
    /// 1-based column numbers.
    pub columns: (usize, usize),
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentReport {
    pub kind: MatrixKind,
    pub n_s: usize,
    pub u0: usize,
    pub rows: Vec<usize>,
    pub points: Vec<PointResult>,
    pub full_rank_fraction: f64,
    pub exists_full_rank_fraction: f64,
    /// The fixed domain set is full rank at every sampled point.
    pub uniform_full_rank: bool,
    pub dependencies: Vec<DependencyCount>,
    /// 1-based columns that vanish, with the number of points where they do.
    pub zero_columns: Vec<(usize, usize)>,
}

/// Evaluation points: half drawn from randomly chosen domains' distributions,
/// half on a fixed lattice over `[-4.5, 4.5]^n_s`.
pub fn sample_points(specs: &[DomainSpec], n_points: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n_s = specs.first().map_or(0, |s| s.changing.len());
    let drawn = n_points / 2;
    let grid = n_points - drawn;
    let mut pts = Vec::with_capacity(n_points);
    for _ in 0..drawn {
        let spec = &specs[rng.random_range(0..specs.len())];
        pts.push(spec.changing.iter().map(|d| d.sample(rng)).collect());
    }
    if grid > 0 && n_s > 0 {
        let per = ((grid as f64).powf(1.0 / n_s as f64).ceil() as usize).max(2);
        let total = per.pow(n_s as u32);
        let axis: Vec<f64> = (0..per).map(|i| -4.5 + 9.0 * i as f64 / (per - 1) as f64).collect();
        for g in 0..grid {
            let mut idx = g * total / grid;
            let mut p = vec![0.0; n_s];
            for c in p.iter_mut() {
                *c = axis[idx % per];
                idx /= per;
            }
            pts.push(p);
        }
    }
    pts
}

/// Rank audit over `n_points` sampled locations with `specs[u0]` as the
/// reference domain.
pub fn check_scenario(
    specs: &[DomainSpec],
    kind: MatrixKind,
    u0: usize,
    n_points: usize,
    rng: &mut impl Rng,
) -> Result<IdentReport, IdentError> {
    let points = sample_points(specs, n_points, rng);
    check_points(specs, kind, u0, &points)
}

pub fn check_points(specs: &[DomainSpec], kind: MatrixKind, u0: usize, points: &[Vec<f64>]) -> Result<IdentReport, IdentError> {
    let n_s = specs.first().map_or(0, |s| s.changing.len());
    let reference = specs.get(u0).ok_or(IdentError::Reference(u0))?;
    let all_others: Vec<&DomainSpec> = specs.iter().enumerate().filter(|(i, _)| *i != u0).map(|(_, s)| s).collect();
    let evaluated: Vec<(IdentMatrix, bool, (Vec<(usize, usize)>, Vec<usize>))> = points
        .par_iter()
        .map(|z| {
            if z.len() != n_s {
                return Err(IdentError::PointShape {
                    got: z.len(),
                    expected: n_s,
                });
            }
            let m = build_matrix(specs, kind, z, u0)?;
            // A matrix of all differences has full column rank iff some
            // square row subset is invertible.
            let stacked = difference_rows(kind, reference, &all_others, z);
            let exists = linalg::svd(&stacked)?.rank(RANK_TOL) == kind.columns(n_s);
            let deps = column_dependencies(&m.entries);
            Ok((m, exists, deps))
        })
        .collect::<Result<_, IdentError>>()?;

    let mut dependencies: Vec<DependencyCount> = Vec::new();
    let mut zero_columns: Vec<(usize, usize)> = Vec::new();
    let mut results = Vec::with_capacity(evaluated.len());
    let mut rows = Vec::new();
    for (m, exists, (pairs, zeros)) in evaluated {
        for p in pairs {
            match dependencies.iter_mut().find(|d| d.columns == p) {
                Some(d) => d.points += 1,
                None => dependencies.push(DependencyCount { columns: p, points: 1 }),
            }
        }
        for c in zeros {
            match zero_columns.iter_mut().find(|(col, _)| *col == c) {
                Some((_, n)) => *n += 1,
                None => zero_columns.push((c, 1)),
            }
        }
        rows = m.rows.clone();
        results.push(PointResult {
            z_s: m.z_s.clone(),
            min_singular: m.singular_values.last().copied().unwrap_or(0.0),
            max_singular: m.singular_values.first().copied().unwrap_or(0.0),
            rank: m.rank,
            full_rank: m.full_rank(),
            exists_full_rank: exists,
        });
    }
    dependencies.sort_by_key(|d| d.columns);
    zero_columns.sort_unstable();
    let n = results.len().max(1) as f64;
    let full = results.iter().filter(|p| p.full_rank).count();
    let exists = results.iter().filter(|p| p.exists_full_rank).count();
    Ok(IdentReport {
        kind,
        n_s,
        u0: reference.domain,
        rows,
        full_rank_fraction: full as f64 / n,
        exists_full_rank_fraction: exists as f64 / n,
        uniform_full_rank: !results.is_empty() && full == results.len(),
        points: results,
        dependencies,
        zero_columns,
    })
}

impl IdentReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} matrix, n_s = {}, reference domain {}, rows {:?}",
            self.kind, self.n_s, self.u0, self.rows
        );
        let _ = writeln!(s, "points evaluated        {}", self.points.len());
        let _ = writeln!(s, "full rank (fixed set)   {:.4}", self.full_rank_fraction);
        let _ = writeln!(s, "full rank (any subset)  {:.4}", self.exists_full_rank_fraction);
        let _ = writeln!(s, "full rank everywhere    {}", self.uniform_full_rank);
        let min_sv = self.points.iter().map(|p| p.min_singular).fold(f64::INFINITY, f64::min);
        let _ = writeln!(s, "smallest singular value {:.3e}", min_sv);
        if self.dependencies.is_empty() {
            let _ = writeln!(s, "dependent columns       none");
        }
        for d in &self.dependencies {
            let _ = writeln!(
                s,
                "dependent columns       {} and {} at {}/{} points",
                d.columns.0,
                d.columns.1,
                d.points,
                self.points.len()
            );
        }
        for (c, n) in &self.zero_columns {
            let _ = writeln!(s, "zero column             {c} at {n}/{} points", self.points.len());
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LatentAudit {
    /// 0-based index into the changing block.
    pub latent: usize,
    pub distinct: usize,
    pub flagged: bool,
}

/// Number of distinct distributions per changing latent (exact parameter
/// equality); with two or more changing latents, fewer than three distinct
/// distributions is flagged.
pub fn minimal_change_audit(specs: &[DomainSpec]) -> Vec<LatentAudit> {
    let n_s = specs.first().map_or(0, |s| s.changing.len());
    (0..n_s)
        .map(|i| {
            let mut seen: Vec<LatentDist> = Vec::new();
            for s in specs {
                let d = s.changing[i];
                if !seen.contains(&d) {
                    seen.push(d);
                }
            }
            LatentAudit {
                latent: i,
                distinct: seen.len(),
                flagged: n_s >= 2 && seen.len() < 3,
            }
        })
        .collect()
}

fn gaussian(mean: f64, variance: f64) -> LatentDist {
    LatentDist::Gaussian { mean, variance }
}

fn two_latent_specs(z1: &[(f64, f64)], z2: &[(f64, f64)]) -> Vec<DomainSpec> {
    z1.iter()
        .zip(z2)
        .enumerate()
        .map(|(domain, (&(m1, v1), &(m2, v2)))| DomainSpec {
            domain,
            changing: vec![gaussian(m1, v1), gaussian(m2, v2)],
        })
        .collect()
}

const Z1_FIVE: [(f64, f64); 5] = [(0.0, 1.0), (1.0, 0.5), (-1.0, 0.3), (2.0, 0.8), (-2.0, 0.6)];

/// Five domains, two changing latents: `z1` differs everywhere, `z2` takes
/// one distribution in the reference domain and a second one in all others.
pub fn repeated_partial() -> Vec<DomainSpec> {
    let b = (1.5, 0.4);
    two_latent_specs(&Z1_FIVE, &[(0.0, 1.0), b, b, b, b])
}

/// As [`repeated_partial`] but `z2` has three distinct distributions.
pub fn repeated_partial_relaxed() -> Vec<DomainSpec> {
    let c = (-1.2, 0.7);
    two_latent_specs(&Z1_FIVE, &[(0.0, 1.0), (1.5, 0.4), c, c, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn fd(dist: &LatentDist, z: f64) -> (f64, f64) {
        let h = 1e-4;
        let f = |x| log_density(dist, x);
        ((f(z + h) - f(z - h)) / (2.0 * h), (f(z + h) - 2.0 * f(z) + f(z - h)) / (h * h))
    }

    #[test]
    fn gaussian_closed_forms() {
        assert_eq!(log_density_derivs(&gaussian(0.0, 1.0), 2.0), (-2.0, -1.0));
        assert_eq!(log_density_derivs(&gaussian(0.0, 0.5), 2.0), (-4.0, -2.0));
        let g = gaussian(0.7, 0.3);
        let h = 1e-5;
        let (d1, _) = log_density_derivs(&g, 1.1);
        let num = (log_density(&g, 1.1 + h) - log_density(&g, 1.1 - h)) / (2.0 * h);
        assert!((d1 - num).abs() < 1e-8);
    }

    #[test]
    fn mixture_matches_finite_differences() {
        let mut r = rng::seeded(2);
        for _ in 0..200 {
            let dist = LatentDist::MixedGaussian {
                scale: r.random_range(0.3..1.0),
                translation: r.random_range(-4.0..4.0),
                combine: Combine::Mixture,
            };
            let z = dist.sample(&mut r);
            let (d1, d2) = log_density_derivs(&dist, z);
            let (n1, n2) = fd(&dist, z);
            assert!((d1 - n1).abs() < 1e-6, "{d1} vs {n1}");
            assert!((d2 - n2).abs() < 1e-6 * (1.0 + d2.abs()) * 10.0, "{d2} vs {n2}");
        }
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        let dist = LatentDist::MixedGaussian {
            scale: 0.5,
            translation: 1.0,
            combine: Combine::Mixture,
        };
        let h = 1e-3;
        let total: f64 = (-10_000..10_000).map(|i| log_density(&dist, 1.0 + i as f64 * h).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn identical_domains_give_zero_matrix() {
        let specs: Vec<DomainSpec> = (0..5)
            .map(|domain| DomainSpec {
                domain,
                changing: vec![gaussian(0.5, 0.7), gaussian(-1.0, 0.2)],
            })
            .collect();
        let m = build_matrix(&specs, MatrixKind::Lemma1, &[0.3, -0.2], 0).unwrap();
        assert!(m.entries.max_abs() == 0.0);
        assert_eq!(m.rank, 0);
    }

    #[test]
    fn gaussian_second_derivative_block_is_constant() {
        let specs = repeated_partial_relaxed();
        let a = build_matrix(&specs, MatrixKind::Lemma1, &[0.0, 0.0], 0).unwrap();
        let b = build_matrix(&specs, MatrixKind::Lemma1, &[1.3, -2.1], 0).unwrap();
        for k in 0..4 {
            for i in 0..2 {
                assert_eq!(a.entries[(k, i)], b.entries[(k, i)]);
            }
        }
        // -1/var_k + 1/var_0 for z1, domain 1
        assert!((a.entries[(0, 0)] - (-1.0 / 0.5 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn insufficient_domains() {
        let specs = repeated_partial();
        assert!(matches!(
            build_matrix(&specs[..4], MatrixKind::Lemma1, &[0.0, 0.0], 0),
            Err(IdentError::InsufficientDomains { needed: 5, got: 4, .. })
        ));
        assert!(build_matrix(&specs[..3], MatrixKind::Theorem1, &[0.0, 0.0], 0).is_ok());
    }

    #[test]
    fn repeated_partial_is_degenerate() {
        let r = check_scenario(&repeated_partial(), MatrixKind::Lemma1, 0, DEFAULT_POINTS, &mut rng::seeded(1)).unwrap();
        assert_eq!(r.full_rank_fraction, 0.0);
        let d = r.dependencies.iter().find(|d| d.columns == (2, 4)).unwrap();
        assert_eq!(d.points, DEFAULT_POINTS);
        let relaxed =
            check_scenario(&repeated_partial_relaxed(), MatrixKind::Lemma1, 0, DEFAULT_POINTS, &mut rng::seeded(1)).unwrap();
        assert!(relaxed.full_rank_fraction > 0.0);
        assert!(relaxed.to_table().contains("lemma1"));
    }

    #[test]
    fn audit_counts() {
        let a = minimal_change_audit(&repeated_partial());
        assert_eq!((a[0].distinct, a[0].flagged), (5, false));
        assert_eq!((a[1].distinct, a[1].flagged), (2, true));
        let mut rev = repeated_partial();
        rev.reverse();
        assert_eq!(minimal_change_audit(&rev), a);
    }

    #[test]
    fn lattice_points_cover_the_box() {
        let pts = sample_points(&repeated_partial(), 200, &mut rng::seeded(0));
        assert_eq!(pts.len(), 200);
        assert!(pts[100..].iter().all(|p| p.iter().all(|v| v.abs() <= 4.5)));
        assert_eq!(pts[100], vec![-4.5, -4.5]);
    }
}
