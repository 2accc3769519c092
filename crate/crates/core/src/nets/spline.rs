//! Monotone rational-quadratic splines with identity tails.
//!
//! Each changing dimension gets `bins` bins on `[-bound, bound]`. Raw
//! parameters are unconstrained: widths and heights pass through a softmax
//! (scaled to `2 * bound`), interior knot derivatives through
//! `softplus + MIN_DERIVATIVE`. Boundary derivatives are fixed at 1 so the
//! spline joins the identity tails smoothly.

use crate::ndgrad::{softplus, softplus_inv, GradError, Graph, Tensor, Var};

pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Raw derivative parameter that maps to a unit knot derivative.
pub fn identity_derivative_param() -> f64 {
    softplus_inv(1.0 - MIN_DERIVATIVE)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineShape {
    pub bins: usize,
    pub bound: f64,
}

impl Default for SplineShape {
    fn default() -> Self {
        Self { bins: 8, bound: 5.0 }
    }
}

/// Records the spline on a graph.
///
/// `x` is `[batch, dims]`; `widths`/`heights` are `[dims, bins]` and
/// `derivs` is `[dims, bins - 1]`. Returns the transformed values and the
/// per-element `log dy/dx`, both `[batch, dims]`.
pub fn forward_graph(
    g: &mut Graph,
    shape: SplineShape,
    x: Var,
    widths: Var,
    heights: Var,
    derivs: Var,
) -> Result<(Var, Var), GradError> {
    let SplineShape { bins, bound } = shape;
    let dims = g.shape(widths)[0];
    let (batch, xd) = {
        let s = g.shape(x);
        (s[0], s[1])
    };
    if xd != dims {
        return Err(GradError::Shape {
            op: "spline",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(widths).to_vec(),
        });
    }

    let knots = |g: &mut Graph, raw: Var| -> Result<(Var, Var), GradError> {
        let sm = g.softmax_last(raw)?;
        let sizes = g.scale(sm, 2.0 * bound)?;
        let cum = g.cumsum_last(sizes)?;
        let right = g.add_scalar(cum, -bound)?;
        let left = g.constant(Tensor::full(&[dims, 1], -bound));
        let k = g.concat_last(&[left, right])?;
        Ok((sizes, k))
    };
    let (w, xk_all) = knots(g, widths)?;
    let (h, yk_all) = knots(g, heights)?;
    let sp = g.softplus(derivs)?;
    let inner = g.add_scalar(sp, MIN_DERIVATIVE)?;
    let ones = g.constant(Tensor::full(&[dims, 1], 1.0));
    let d_all = g.concat_last(&[ones, inner, ones])?;

    let xv = g.value(x).data().to_vec();
    let kx = g.value(xk_all).data().to_vec();
    let mut inside = Vec::with_capacity(xv.len());
    let mut fill = Vec::with_capacity(xv.len());
    let mut knot_idx = Vec::with_capacity(xv.len());
    let mut bin_idx = Vec::with_capacity(xv.len());
    let mut next_idx = Vec::with_capacity(xv.len());
    for (j, &v) in xv.iter().enumerate() {
        let d = j % dims;
        let ins = (-bound..=bound).contains(&v);
        let probe = if ins { v } else { 0.0 };
        let row = &kx[d * (bins + 1)..(d + 1) * (bins + 1)];
        let k = search_bin(row, probe, bins);
        inside.push(ins);
        fill.push(0.0);
        knot_idx.push(d * (bins + 1) + k);
        next_idx.push(d * (bins + 1) + k + 1);
        bin_idx.push(d * bins + k);
    }
    let out_shape = vec![batch, dims];
    let fill = g.constant(Tensor::new(out_shape.clone(), fill)?);
    let xin = g.select(inside.clone(), x, fill)?;

    let xk = g.take(xk_all, knot_idx.clone(), out_shape.clone())?;
    let yk = g.take(yk_all, knot_idx.clone(), out_shape.clone())?;
    let wk = g.take(w, bin_idx.clone(), out_shape.clone())?;
    let hk = g.take(h, bin_idx, out_shape.clone())?;
    let dk = g.take(d_all, knot_idx, out_shape.clone())?;
    let dk1 = g.take(d_all, next_idx, out_shape.clone())?;

    let s = g.div(hk, wk)?;
    let off = g.sub(xin, xk)?;
    let xi = g.div(off, wk)?;
    let nxi = g.neg(xi)?;
    let om = g.add_scalar(nxi, 1.0)?;
    let xo = g.mul(xi, om)?;
    let xi2 = g.square(xi)?;
    let om2 = g.square(om)?;

    // y = y_k + h (s xi^2 + d_k xi (1 - xi)) / (s + (d_k1 + d_k - 2 s) xi (1 - xi))
    let s_xi2 = g.mul(s, xi2)?;
    let dk_xo = g.mul(dk, xo)?;
    let inner_num = g.add(s_xi2, dk_xo)?;
    let num = g.mul(hk, inner_num)?;
    let dsum = g.add(dk1, dk)?;
    let two_s = g.scale(s, 2.0)?;
    let slope_gap = g.sub(dsum, two_s)?;
    let gap_xo = g.mul(slope_gap, xo)?;
    let den = g.add(s, gap_xo)?;
    let frac = g.div(num, den)?;
    let y = g.add(yk, frac)?;

    // dy/dx = s^2 (d_k1 xi^2 + 2 s xi (1 - xi) + d_k (1 - xi)^2) / den^2
    let a = g.mul(dk1, xi2)?;
    let b = g.mul(two_s, xo)?;
    let c = g.mul(dk, om2)?;
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    let s2 = g.square(s)?;
    let dnum = g.mul(s2, abc)?;
    let log_dnum = g.log(dnum)?;
    let log_den = g.log(den)?;
    let two_log_den = g.scale(log_den, 2.0)?;
    let logdet = g.sub(log_dnum, two_log_den)?;

    let zeros = g.constant(Tensor::zeros(&out_shape));
    let y_out = g.select(inside.clone(), y, x)?;
    let ld_out = g.select(inside, logdet, zeros)?;
    Ok((y_out, ld_out))
}

/// Index of the bin containing `v`: the last knot `<= v`, capped at the final bin.
fn search_bin(knots: &[f64], v: f64, bins: usize) -> usize {
    let pos = knots.partition_point(|&k| k <= v);
    pos.saturating_sub(1).min(bins - 1)
}

/// A single one-dimensional spline evaluated outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct RqSpline {
    bound: f64,
    xk: Vec<f64>,
    yk: Vec<f64>,
    d: Vec<f64>,
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn knots_from(raw: &[f64], bound: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len() + 1);
    out.push(-bound);
    let mut acc = 0.0;
    for s in softmax(raw) {
        acc += s * 2.0 * bound;
        out.push(acc - bound);
    }
    out
}

impl RqSpline {
    /// Builds the spline from one row of raw parameters.
    pub fn from_raw(widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64) -> Self {
        assert_eq!(widths.len(), heights.len());
        assert_eq!(derivs.len() + 1, widths.len());
        let mut d = Vec::with_capacity(widths.len() + 1);
        d.push(1.0);
        d.extend(derivs.iter().map(|&v| softplus(v) + MIN_DERIVATIVE));
        d.push(1.0);
        Self {
            bound,
            xk: knots_from(widths, bound),
            yk: knots_from(heights, bound),
            d,
        }
    }

    pub fn identity(shape: SplineShape) -> Self {
        let bins = shape.bins;
        Self::from_raw(
            &vec![0.0; bins],
            &vec![0.0; bins],
            &vec![identity_derivative_param(); bins - 1],
            shape.bound,
        )
    }

    fn bins(&self) -> usize {
        self.xk.len() - 1
    }

    /// Returns `(y, log dy/dx)`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        if !(-self.bound..=self.bound).contains(&x) {
            return (x, 0.0);
        }
        let k = search_bin(&self.xk, x, self.bins());
        let w = self.xk[k + 1] - self.xk[k];
        let h = self.yk[k + 1] - self.yk[k];
        let s = h / w;
        let xi = (x - self.xk[k]) / w;
        let xo = xi * (1.0 - xi);
        let (dk, dk1) = (self.d[k], self.d[k + 1]);
        let den = s + (dk1 + dk - 2.0 * s) * xo;
        let y = self.yk[k] + h * (s * xi * xi + dk * xo) / den;
        let dnum = s * s * (dk1 * xi * xi + 2.0 * s * xo + dk * (1.0 - xi).powi(2));
        (y, dnum.ln() - 2.0 * den.ln())
    }

    pub fn inverse(&self, y: f64) -> f64 {
        if !(-self.bound..=self.bound).contains(&y) {
            return y;
        }
        let k = search_bin(&self.yk, y, self.bins());
        let w = self.xk[k + 1] - self.xk[k];
        let h = self.yk[k + 1] - self.yk[k];
        let s = h / w;
        let (dk, dk1) = (self.d[k], self.d[k + 1]);
        let dy = y - self.yk[k];
        let gap = dk1 + dk - 2.0 * s;
        let a = h * (s - dk) + dy * gap;
        let b = h * dk - dy * gap;
        let c = -s * dy;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let xi = (2.0 * c) / (-b - disc.sqrt());
        self.xk[k] + xi.clamp(0.0, 1.0) * w
    }
}
