//! Training objective: reconstruction + alpha * KL(invariant posterior || N(0, I))
//! + beta * KL(flow-transformed changing posterior || N(0, I)).
//!
//! All terms are summed over dimensions and averaged over the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ndgrad::{GradError, Graph, Tensor, Var};
use crate::nets::{reparameterize_with, Model};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_c: f64,
    pub kl_s: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Graph handles of each loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub kl_c: Var,
    pub kl_s: Var,
    pub total: Var,
    pub weights: LossWeights,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            recon: g.value(self.recon).item(),
            kl_c: g.value(self.kl_c).item(),
            kl_s: g.value(self.kl_s).item(),
            total: g.value(self.total).item(),
            alpha: self.weights.alpha,
            beta: self.weights.beta,
        }
    }
}

fn batch_of(g: &Graph, v: Var) -> f64 {
    g.shape(v).first().copied().unwrap_or(1).max(1) as f64
}

/// Batch mean of `0.5 * ||x - x_hat||^2`.
pub fn recon_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var, GradError> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(GradError::Shape {
            op: "recon_loss",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(x_hat).to_vec(),
        });
    }
    let b = batch_of(g, x);
    let diff = g.sub(x_hat, x)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    g.scale(s, 0.5 / b)
}

/// Batch mean of `0.5 * sum_d (mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn kl_gaussian(g: &mut Graph, mean: Var, logvar: Var) -> Result<Var, GradError> {
    if g.shape(mean) != g.shape(logvar) {
        return Err(GradError::Shape {
            op: "kl_gaussian",
            lhs: g.shape(mean).to_vec(),
            rhs: g.shape(logvar).to_vec(),
        });
    }
    let b = batch_of(g, mean);
    let m2 = g.square(mean)?;
    let var = g.exp(logvar)?;
    let a = g.add(m2, var)?;
    let a = g.sub(a, logvar)?;
    let a = g.add_scalar(a, -1.0)?;
    let s = g.sum(a)?;
    g.scale(s, 0.5 / b)
}

/// Single-sample Monte-Carlo KL of the flow-transformed changing posterior
/// against N(0, I).
///
/// `zs = mean_s + exp(logvar_s / 2) * eps_s` must already be sampled; row `i`
/// is routed through the flow of `domains[i]`. Per row the estimate is
/// `sum_d (-0.5 logvar - 0.5 eps^2 - logdet + 0.5 z~^2)`; the Gaussian
/// normalizers cancel.
pub fn kl_changing_sampled(
    g: &mut Graph,
    model: &Model,
    vars: &[Var],
    zs: Var,
    logvar_s: Var,
    eps_s: Var,
    domains: &[usize],
) -> Result<Var, GradError> {
    let b = batch_of(g, zs);
    if domains.len() != g.shape(zs)[0] {
        return Err(GradError::Invalid {
            op: "kl_changing",
            msg: format!("{} domain labels for {} rows", domains.len(), g.shape(zs)[0]),
        });
    }
    // log q(z_s | x) up to the shared constant.
    let e2 = g.square(eps_s)?;
    let lq = g.add(logvar_s, e2)?;
    let lq_sum = g.sum(lq)?;
    let mut acc = g.scale(lq_sum, -0.5)?;

    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (row, &u) in domains.iter().enumerate() {
        match groups.iter_mut().find(|(d, _)| *d == u) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((u, vec![row])),
        }
    }
    let single = groups.len() == 1;
    for (u, rows) in groups {
        let part = if single { zs } else { g.take_rows(zs, &rows)? };
        let (zt, logdet) = model.flow_forward(g, vars, u, part)?;
        let zt2 = g.square(zt)?;
        let half = g.scale(zt2, 0.5)?;
        let term = g.sub(half, logdet)?;
        let s = g.sum(term)?;
        acc = g.add(acc, s)?;
    }
    g.scale(acc, 1.0 / b)
}

/// Draws the reparameterized sample, then evaluates [`kl_changing_sampled`].
pub fn kl_changing(
    g: &mut Graph,
    model: &Model,
    vars: &[Var],
    mean_s: Var,
    logvar_s: Var,
    domains: &[usize],
    rng: &mut impl Rng,
) -> Result<Var, GradError> {
    let shape = g.shape(mean_s).to_vec();
    let n = shape.iter().product();
    let eps = g.constant(Tensor::new(shape, rng::normals(rng, n))?);
    let zs = reparameterize_with(g, mean_s, logvar_s, eps)?;
    kl_changing_sampled(g, model, vars, zs, logvar_s, eps, domains)
}

/// `recon + alpha * kl_c + beta * kl_s`.
pub fn combine(g: &mut Graph, recon: Var, kl_c: Var, kl_s: Var, w: LossWeights) -> Result<Var, GradError> {
    let a = g.scale(kl_c, w.alpha)?;
    let b = g.scale(kl_s, w.beta)?;
    let t = g.add(recon, a)?;
    g.add(t, b)
}

/// Full pipeline: encode, sample, split `[z_c, z_s]`, flow, decode.
pub fn total_loss(
    g: &mut Graph,
    model: &Model,
    vars: &[Var],
    x: &Tensor,
    domains: &[usize],
    weights: LossWeights,
    rng: &mut impl Rng,
) -> Result<LossVars, GradError> {
    let cfg = model.config;
    let xv = g.constant(x.clone());
    let (mean, logvar) = model.encode(g, vars, xv)?;
    let shape = g.shape(mean).to_vec();
    let n = shape.iter().product();
    let eps = g.constant(Tensor::new(shape, rng::normals(rng, n))?);
    let z = reparameterize_with(g, mean, logvar, eps)?;
    let x_hat = model.decode(g, vars, z)?;
    let recon = recon_loss(g, xv, x_hat)?;

    let n_c = cfg.n_c();
    let kl_c = if n_c > 0 {
        let m = g.slice_last(mean, 0, n_c)?;
        let lv = g.slice_last(logvar, 0, n_c)?;
        kl_gaussian(g, m, lv)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let zs = g.slice_last(z, n_c, cfg.n_s)?;
    let lvs = g.slice_last(logvar, n_c, cfg.n_s)?;
    let eps_s = g.slice_last(eps, n_c, cfg.n_s)?;
    let kl_s = kl_changing_sampled(g, model, vars, zs, lvs, eps_s, domains)?;
    let total = combine(g, recon, kl_c, kl_s, weights)?;
    Ok(LossVars {
        recon,
        kl_c,
        kl_s,
        total,
        weights,
    })
}
