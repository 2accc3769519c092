//! Mean correlation coefficient between estimated and true changing latents.
//!
//! Pairs are matched on the raw |Pearson| table, then each matched pair gets a
//! small MLP regression (estimate -> truth) fitted on one half of the samples
//! and scored on the other half.

pub mod assignment;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndgrad::{Adam, AdamConfig, GradError, Graph, ParamStore, Tensor};
use crate::rng;

pub use assignment::{max_score_assignment, min_cost_assignment};

pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum MccError {
    #[error("series lengths differ or are too short ({0} and {1})")]
    Length(usize, usize),
    #[error("zero variance in series")]
    ZeroVariance,
    #[error("estimate has {est} columns, truth has {truth}")]
    Columns { est: usize, truth: usize },
    #[error("need at least {MIN_SAMPLES} samples for the regression split, got {0}")]
    TooFewSamples(usize),
}

/// `|corr(a, b)|`.
pub fn pearson_abs(a: &[f64], b: &[f64]) -> Result<f64, MccError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MccError::Length(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(MccError::ZeroVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).abs().min(1.0))
}

/// `table[t][e] = |corr(truth_t, estimate_e)|`.
pub fn corr_table(est: &Tensor, truth: &Tensor) -> Result<Vec<Vec<f64>>, MccError> {
    if est.cols() != truth.cols() {
        return Err(MccError::Columns {
            est: est.cols(),
            truth: truth.cols(),
        });
    }
    let ec: Vec<Vec<f64>> = (0..est.cols()).map(|j| column(est, j)).collect();
    (0..truth.cols())
        .map(|t| {
            let tc = column(truth, t);
            ec.iter().map(|e| pearson_abs(&tc, e)).collect()
        })
        .collect()
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.at(i, j)).collect()
}

/// Regressor used to remove component-wise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub slope: f64,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            lr: 0.01,
            slope: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairResult {
    pub corr: f64,
    /// Regression failed; `corr` is the raw held-out correlation instead.
    pub fallback: bool,
}

fn standardize(xs: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    (sd > 0.0 && sd.is_finite()).then_some((m, sd))
}

fn fit_predict(xtr: &[f64], ytr: &[f64], xte: &[f64], cfg: &RegressionConfig, stream: &str) -> Result<Vec<f64>, GradError> {
    let invalid = |msg: &str| GradError::Invalid {
        op: "regression",
        msg: msg.to_string(),
    };
    let (mx, sx) = standardize(xtr).ok_or_else(|| invalid("constant input"))?;
    let (my, sy) = standardize(ytr).ok_or_else(|| invalid("constant target"))?;
    let col = |xs: &[f64], m: f64, s: f64| Tensor::matrix(xs.len(), 1, xs.iter().map(|x| (x - m) / s).collect());
    let x = col(xtr, mx, sx)?;
    let y = col(ytr, my, sy)?;
    let xt = col(xte, mx, sx)?;

    let mut r = rng::stream(cfg.seed, stream);
    let h = cfg.hidden;
    let gain = (2.0 / (1.0 + cfg.slope * cfg.slope)).sqrt();
    let mut params = ParamStore::new();
    params.push("w1", Tensor::matrix(1, h, rng::normals(&mut r, h).iter().map(|v| v * gain).collect())?);
    params.push("b1", Tensor::zeros(&[h]));
    let s2 = gain / (h as f64).sqrt();
    params.push("w2", Tensor::matrix(h, 1, rng::normals(&mut r, h).iter().map(|v| v * s2).collect())?);
    params.push("b2", Tensor::zeros(&[1]));
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let forward = |g: &mut Graph, p: &[crate::ndgrad::Var], input: &Tensor| -> Result<_, GradError> {
        let xi = g.constant(input.clone());
        let a = g.matmul(xi, p[0])?;
        let a = g.add(a, p[1])?;
        let a = g.leaky_relu(a, cfg.slope)?;
        let o = g.matmul(a, p[2])?;
        g.add(o, p[3])
    };
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let pred = forward(&mut g, &p, &x)?;
        let yv = g.constant(y.clone());
        let d = g.sub(pred, yv)?;
        let sq = g.square(d)?;
        let loss = g.mean(sq)?;
        let grads = g.backward(loss)?;
        let per: Vec<Tensor> = p.iter().map(|&v| grads.wrt(v)).collect();
        adam.step(&mut params, &per)?;
    }
    let mut g = Graph::new();
    let p: Vec<_> = params.tensors().iter().map(|t| g.constant(t.clone())).collect();
    let out = forward(&mut g, &p, &xt)?;
    let pred = g.value(out).data().to_vec();
    if pred.iter().all(|v| v.is_finite()) {
        Ok(pred)
    } else {
        Err(GradError::NonFinite { op: "regression" })
    }
}

/// Held-out |corr| after regressing `truth` on `est` with a small MLP.
///
/// A seeded permutation splits the pairs 50/50. If the regression fails or
/// its predictions are constant, the raw held-out correlation is reported and
/// `fallback` is set.
pub fn remove_nonlinearity(est: &[f64], truth: &[f64], cfg: &RegressionConfig, stream: &str) -> Result<PairResult, MccError> {
    if est.len() != truth.len() {
        return Err(MccError::Length(est.len(), truth.len()));
    }
    if est.len() < MIN_SAMPLES {
        return Err(MccError::TooFewSamples(est.len()));
    }
    let perm = rng::permutation(&mut rng::stream(cfg.seed, &format!("{stream}/split")), est.len());
    let half = est.len() / 2;
    let pick = |xs: &[f64], idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| xs[i]).collect() };
    let (tr, te) = perm.split_at(half);
    let (xtr, ytr, xte, yte) = (pick(est, tr), pick(truth, tr), pick(est, te), pick(truth, te));
    match fit_predict(&xtr, &ytr, &xte, cfg, stream) {
        Ok(pred) => match pearson_abs(&pred, &yte) {
            Ok(c) => Ok(PairResult { corr: c, fallback: false }),
            Err(_) => Ok(PairResult {
                corr: pearson_abs(&xte, &yte)?,
                fallback: true,
            }),
        },
        Err(e) => {
            log::warn!("regression for {stream} failed ({e}); reporting raw correlation");
            Ok(PairResult {
                corr: pearson_abs(&xte, &yte)?,
                fallback: true,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MccReport {
    /// `corr_table[t][e]`: raw |corr| of true latent `t` and estimate `e`.
    pub corr_table: Vec<Vec<f64>>,
    /// `assignment[t]` is the estimate matched to true latent `t`.
    pub assignment: Vec<usize>,
    /// Post-regression held-out correlation per true latent.
    pub pairs: Vec<PairResult>,
    pub mcc: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl MccReport {
    pub fn per_latent(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.corr).collect()
    }
}

/// Full pipeline: correlation table, assignment, per-pair regression, mean.
pub fn mcc(est: &Tensor, truth: &Tensor, cfg: &RegressionConfig) -> Result<MccReport, MccError> {
    if est.rows() != truth.rows() {
        return Err(MccError::Length(est.rows(), truth.rows()));
    }
    let table = corr_table(est, truth)?;
    let assignment = max_score_assignment(&table);
    let pairs = assignment
        .par_iter()
        .enumerate()
        .map(|(t, &e)| remove_nonlinearity(&column(est, e), &column(truth, t), cfg, &format!("pair/{t}")))
        .collect::<Result<Vec<_>, _>>()?;
    let mcc = pairs.iter().map(|p| p.corr).sum::<f64>() / pairs.len().max(1) as f64;
    Ok(MccReport {
        corr_table: table,
        assignment,
        pairs,
        mcc,
        train_size: est.rows() / 2,
        test_size: est.rows() - est.rows() / 2,
    })
}
