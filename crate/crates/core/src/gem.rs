//! Gradient episodic memory: per-domain reservoirs, past-domain gradients and
//! the projection `min ||v' - v||^2 s.t. B v' >= margin`.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::elbo::{self, LossWeights};
use crate::linalg::{dot, norm};
use crate::ndgrad::{GradError, Graph, Tensor};
use crate::nets::Model;
use crate::rng::{self, RunRng};

pub const DEFAULT_CAPACITY: usize = 256;

#[derive(Debug, Error)]
pub enum GemError {
    #[error("dual solver stopped after {iterations} iterations with KKT residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("constraint row {row} has length {got}, expected {expected}")]
    Shape { row: usize, got: usize, expected: usize },
    #[error("memory for domain {0} is empty")]
    EmptyMemory(usize),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Reservoir {
    rows: Vec<Vec<f64>>,
    seen: usize,
}

/// Per-domain uniform reservoirs of raw observations.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    stores: BTreeMap<usize, Reservoir>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        Self {
            capacity,
            stores: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Feeds every row of `batch` to the reservoir of `domain` (Algorithm R).
    pub fn reservoir_update(&mut self, domain: usize, batch: &Tensor, rng: &mut impl Rng) {
        let store = self.stores.entry(domain).or_default();
        for r in 0..batch.rows() {
            store.seen += 1;
            if store.rows.len() < self.capacity {
                store.rows.push(batch.row(r).to_vec());
            } else {
                let j = rng.random_range(0..store.seen);
                if j < self.capacity {
                    store.rows[j] = batch.row(r).to_vec();
                }
            }
        }
    }

    pub fn len(&self, domain: usize) -> usize {
        self.stores.get(&domain).map_or(0, |s| s.rows.len())
    }

    pub fn seen(&self, domain: usize) -> usize {
        self.stores.get(&domain).map_or(0, |s| s.seen)
    }

    pub fn domains(&self) -> Vec<usize> {
        self.stores.keys().copied().collect()
    }

    pub fn memory(&self, domain: usize) -> Option<Tensor> {
        let store = self.stores.get(&domain)?;
        if store.rows.is_empty() {
            return None;
        }
        Tensor::from_rows(&store.rows).ok()
    }
}

/// Flat gradient of the training loss on one batch from a single domain.
pub fn domain_gradient(
    model: &Model,
    x: &Tensor,
    domain: usize,
    weights: LossWeights,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, GemError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let loss = elbo::total_loss(&mut g, model, &vars, x, &vec![domain; x.rows()], weights, rng)?;
    let grads = g.backward(loss.total)?;
    let per: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    Ok(model.params.flatten(&per))
}

/// One gradient row per past domain, each over the full current parameter
/// vector. Parameters a domain never touches (later flows) get zeros.
///
/// Each domain gets its own noise stream forked from `rng` in domain order,
/// so the result does not depend on thread scheduling.
pub fn past_gradients(
    model: &Model,
    bank: &MemoryBank,
    past: &[usize],
    weights: LossWeights,
    rng: &mut RunRng,
) -> Result<Vec<Vec<f64>>, GemError> {
    let jobs: Vec<(usize, RunRng)> = past.iter().map(|&u| (u, rng::fork(rng))).collect();
    jobs.into_par_iter()
        .map(|(u, mut r)| {
            let mem = bank.memory(u).ok_or(GemError::EmptyMemory(u))?;
            domain_gradient(model, &mem, u, weights, &mut r)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectOptions {
    /// Right-hand side of the constraints; 0 reproduces the plain projection.
    pub margin: f64,
    pub max_iterations: usize,
    /// Absolute tolerance on the KKT conditions, multiplied by `max(1, |B| |v|)`.
    pub tolerance: f64,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        Self {
            margin: 0.0,
            max_iterations: 500,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub v: Vec<f64>,
    /// Constraints violated by the input direction.
    pub violated: usize,
    /// Dual multipliers (empty when no solve was needed).
    pub multipliers: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl Projection {
    pub fn solved(&self) -> bool {
        !self.multipliers.is_empty()
    }
}

pub fn project(v: &[f64], b: &[Vec<f64>]) -> Result<Projection, GemError> {
    project_with(v, b, ProjectOptions::default())
}

/// Projects `v` onto `{x : B x >= margin}`.
///
/// When `v` already satisfies every constraint it is returned untouched.
/// Otherwise the dual `min_w 0.5 w'BB'w + w'(Bv - margin), w >= 0` is solved
/// with an active-set (Lawson-Hanson) iteration; least-squares subproblems on
/// the free set use a QR factorization of the free rows of `B`, which avoids
/// squaring the condition number of nearly parallel gradients.
pub fn project_with(v: &[f64], b: &[Vec<f64>], opts: ProjectOptions) -> Result<Projection, GemError> {
    for (i, row) in b.iter().enumerate() {
        if row.len() != v.len() {
            return Err(GemError::Shape {
                row: i,
                got: row.len(),
                expected: v.len(),
            });
        }
    }
    let bv: Vec<f64> = b.iter().map(|r| dot(r, v)).collect();
    let violated = bv.iter().filter(|&&s| s < opts.margin).count();
    if violated == 0 {
        return Ok(Projection {
            v: v.to_vec(),
            violated,
            multipliers: Vec::new(),
            kkt_residual: 0.0,
            iterations: 0,
        });
    }

    let k = b.len();
    let scale = 1f64.max(b.iter().map(|r| norm(r)).fold(0.0, f64::max) * norm(v).max(opts.margin.abs()));
    let tol = opts.tolerance * scale;
    let mut w = vec![0.0; k];
    let mut free: Vec<usize> = Vec::new();
    let mut blocked = vec![false; k];
    let mut iterations = 0;

    loop {
        let vp = combine(v, b, &w);
        // Dual gradient = B v' - margin.
        let grad: Vec<f64> = b.iter().map(|r| dot(r, &vp) - opts.margin).collect();
        let entering = (0..k)
            .filter(|&i| !free.contains(&i) && !blocked[i] && grad[i] < -tol)
            .min_by(|&x, &y| grad[x].total_cmp(&grad[y]));
        let Some(j) = entering else { break };
        iterations += 1;
        if iterations > opts.max_iterations {
            return Err(GemError::NoConvergence {
                iterations,
                residual: kkt_residual(&w, &grad),
            });
        }
        free.push(j);
        loop {
            let Some(s) = free_solve(v, b, &free, opts.margin) else {
                // Row j is dependent on the free rows: it cannot enter.
                free.pop();
                blocked[j] = true;
                break;
            };
            if s.iter().all(|&x| x > 0.0) {
                w.iter_mut().for_each(|x| *x = 0.0);
                for (&i, &x) in free.iter().zip(&s) {
                    w[i] = x;
                }
                blocked.iter_mut().for_each(|x| *x = false);
                break;
            }
            // Step toward s until the first free multiplier hits zero.
            let mut alpha = 1.0f64;
            for (&i, &x) in free.iter().zip(&s) {
                if x <= 0.0 {
                    alpha = alpha.min(w[i] / (w[i] - x));
                }
            }
            for (&i, &x) in free.iter().zip(&s) {
                w[i] += alpha * (x - w[i]);
            }
            free.retain(|&i| w[i] > 0.0);
            for i in 0..k {
                if !free.contains(&i) {
                    w[i] = 0.0;
                }
            }
            if free.is_empty() {
                break;
            }
        }
    }

    let vp = combine(v, b, &w);
    let grad: Vec<f64> = b.iter().map(|r| dot(r, &vp) - opts.margin).collect();
    let residual = kkt_residual(&w, &grad);
    if residual > tol.max(1e-8 * scale) {
        return Err(GemError::NoConvergence { iterations, residual });
    }
    Ok(Projection {
        v: vp,
        violated,
        multipliers: w,
        kkt_residual: residual,
        iterations,
    })
}

fn combine(v: &[f64], b: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    for (row, &wi) in b.iter().zip(w) {
        if wi != 0.0 {
            for (o, r) in out.iter_mut().zip(row) {
                *o += wi * r;
            }
        }
    }
    out
}

/// Max violation of dual feasibility, primal feasibility and complementarity.
fn kkt_residual(w: &[f64], grad: &[f64]) -> f64 {
    w.iter()
        .zip(grad)
        .map(|(&wi, &gi)| (-wi).max(0.0).max((-gi).max(0.0)).max((wi * gi).abs()))
        .fold(0.0, f64::max)
}

/// Unconstrained minimizer of the dual restricted to the free rows:
/// `B_F B_F' s = margin - B_F v`. Solved as `R s = Q'(-v) + R^{-T} margin`
/// from a QR factorization `B_F' = Q R`. Returns `None` for dependent rows.
fn free_solve(v: &[f64], b: &[Vec<f64>], free: &[usize], margin: f64) -> Option<Vec<f64>> {
    let m = free.len();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut r = vec![vec![0.0; m]; m];
    for (c, &i) in free.iter().enumerate() {
        let mut col = b[i].clone();
        let original = norm(&col);
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for (p, qp) in q.iter().enumerate() {
                let proj = dot(qp, &col);
                r[p][c] += proj;
                for (x, y) in col.iter_mut().zip(qp) {
                    *x -= proj * y;
                }
            }
        }
        let rest = norm(&col);
        if rest <= 1e-12 * original || rest == 0.0 {
            return None;
        }
        r[c][c] = rest;
        col.iter_mut().for_each(|x| *x /= rest);
        q.push(col);
    }
    // R^T y = margin * 1
    let mut y = vec![0.0; m];
    for i in 0..m {
        let mut acc = margin;
        for p in 0..i {
            acc -= r[p][i] * y[p];
        }
        y[i] = acc / r[i][i];
    }
    let rhs: Vec<f64> = q.iter().zip(&y).map(|(qi, yi)| -dot(qi, v) + yi).collect();
    let mut s = vec![0.0; m];
    for i in (0..m).rev() {
        let mut acc = rhs[i];
        for p in (i + 1)..m {
            acc -= r[i][p] * s[p];
        }
        s[i] = acc / r[i][i];
    }
    Some(s)
}

/// Brute-force projection: tries every active set, projects `v` onto the
/// null space of the active rows and keeps the closest feasible point.
/// Exponential in the number of rows, for verification only.
pub fn qp_oracle(v: &[f64], b: &[Vec<f64>]) -> Vec<f64> {
    let k = b.len();
    assert!(k <= 16, "oracle is exponential in the number of constraints");
    let scale = 1f64.max(b.iter().map(|r| norm(r)).fold(0.0, f64::max) * norm(v));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << k) {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for (i, row) in b.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            let mut u = row.clone();
            for q in &basis {
                let p = dot(q, &u);
                u.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
            }
            let n = norm(&u);
            if n > 1e-12 * norm(row) {
                u.iter_mut().for_each(|x| *x /= n);
                basis.push(u);
            }
        }
        let mut x = v.to_vec();
        for q in &basis {
            let p = dot(q, &x);
            x.iter_mut().zip(q).for_each(|(a, c)| *a -= p * c);
        }
        if b.iter().all(|r| dot(r, &x) >= -1e-9 * scale) {
            let d: f64 = x.iter().zip(v).map(|(a, c)| (a - c) * (a - c)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, x));
            }
        }
    }
    best.map(|(_, x)| x).unwrap_or_else(|| vec![0.0; v.len()])
}

/// One row of the optional per-step diagnostics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub violated: usize,
    pub norm_v: f64,
    pub norm_v_proj: f64,
    pub angle: f64,
}

impl StepDiagnostics {
    pub fn new(step: usize, v: &[f64], p: &Projection) -> Self {
        let (nv, np) = (norm(v), norm(&p.v));
        let angle = if nv > 0.0 && np > 0.0 {
            (dot(v, &p.v) / (nv * np)).clamp(-1.0, 1.0).acos()
        } else {
            0.0
        };
        Self {
            step,
            violated: p.violated,
            norm_v: nv,
            norm_v_proj: np,
            angle,
        }
    }
}

pub fn write_diagnostics(out: &mut impl Write, rows: &[StepDiagnostics]) -> std::io::Result<()> {
    writeln!(out, "step,violated,norm_v,norm_v_proj,angle")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.step, r.violated, r.norm_v, r.norm_v_proj, r.angle)?;
    }
    Ok(())
}
