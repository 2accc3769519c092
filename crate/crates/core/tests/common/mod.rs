#![allow(dead_code)]

use ccica::identcheck::{build_matrix, MatrixKind};
use ccica::ndgrad::{Graph, Tensor, Var};
use ccica::synthgen::{sample_dist, Combine, DomainSpec, LatentFamily};
use ccica::rng::{self, RunRng};
use rand::Rng;

pub const OPS: [&str; 24] = [
    "add", "sub", "mul", "div", "matmul", "scale", "neg", "add_scalar", "leaky_relu", "exp", "log", "square", "softplus",
    "clamp", "sum", "mean", "softmax_last", "cumsum_last", "reshape", "slice_last", "concat_last", "take", "take_rows",
    "select",
];

const KINK_GAP: f64 = 1e-4;

struct Builder<'a> {
    g: Graph,
    rng: RunRng,
    leaves: Vec<Var>,
    overrides: Option<&'a [Tensor]>,
    kink: f64,
    used: Vec<&'static str>,
}

impl Builder<'_> {
    fn leaf(&mut self, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let fresh = Tensor::new(shape.to_vec(), rng::normals(&mut self.rng, n)).unwrap();
        let value = match self.overrides {
            Some(o) => o[self.leaves.len()].clone(),
            None => fresh,
        };
        let v = self.g.leaf(value);
        self.leaves.push(v);
        v
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.g.shape(v).to_vec()
    }

    fn note_kink(&mut self, v: Var, points: &[f64]) {
        for &x in self.g.value(v).data() {
            for &p in points {
                self.kink = self.kink.min((x - p).abs());
            }
        }
    }

    fn apply(&mut self, op: &'static str, cur: Var) -> Var {
        self.used.push(op);
        let s = self.shape(cur);
        let (r, c) = (s[0], s[1]);
        match op {
            "add" | "sub" | "mul" => {
                let other = match self.rng.random_range(0..3) {
                    0 => self.leaf(&[r, c]),
                    1 => self.leaf(&[c]),
                    _ => self.leaf(&[1]),
                };
                let (a, b) = if self.rng.random::<bool>() { (cur, other) } else { (other, cur) };
                match op {
                    "add" => self.g.add(a, b),
                    "sub" => self.g.sub(a, b),
                    _ => self.g.mul(a, b),
                }
                .unwrap()
            }
            "div" => {
                let d = self.leaf(&[r, c]);
                let d2 = self.g.square(d).unwrap();
                let den = self.g.add_scalar(d2, 0.5).unwrap();
                self.g.div(cur, den).unwrap()
            }
            "matmul" => {
                let k = self.rng.random_range(1..4);
                let w = self.leaf(&[c, k]);
                self.g.matmul(cur, w).unwrap()
            }
            "scale" => {
                let k = self.rng.random_range(-2.0..2.0);
                self.g.scale(cur, k).unwrap()
            }
            "neg" => self.g.neg(cur).unwrap(),
            "add_scalar" => {
                let k = self.rng.random_range(-1.0..1.0);
                self.g.add_scalar(cur, k).unwrap()
            }
            "leaky_relu" => {
                self.note_kink(cur, &[0.0]);
                self.g.leaky_relu(cur, 0.2).unwrap()
            }
            "exp" => {
                let h = self.g.scale(cur, 0.5).unwrap();
                self.g.exp(h).unwrap()
            }
            "log" => {
                let p = self.g.softplus(cur).unwrap();
                let p = self.g.add_scalar(p, 0.1).unwrap();
                self.g.log(p).unwrap()
            }
            "square" => self.g.square(cur).unwrap(),
            "softplus" => self.g.softplus(cur).unwrap(),
            "clamp" => {
                self.note_kink(cur, &[-0.8, 0.8]);
                self.g.clamp(cur, -0.8, 0.8).unwrap()
            }
            "sum" | "mean" => {
                let red = if op == "sum" { self.g.sum(cur).unwrap() } else { self.g.mean(cur).unwrap() };
                let other = self.leaf(&[r, c]);
                self.g.mul(other, red).unwrap()
            }
            "softmax_last" => self.g.softmax_last(cur).unwrap(),
            "cumsum_last" => self.g.cumsum_last(cur).unwrap(),
            "reshape" => self.g.reshape(cur, vec![1, r * c]).unwrap(),
            "slice_last" => {
                let len = self.rng.random_range(1..=c);
                let start = self.rng.random_range(0..=c - len);
                self.g.slice_last(cur, start, len).unwrap()
            }
            "concat_last" => {
                let k = self.rng.random_range(1..3);
                let other = self.leaf(&[r, k]);
                self.g.concat_last(&[cur, other]).unwrap()
            }
            "take" => {
                let n = r * c;
                let idx: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..n)).collect();
                self.g.take(cur, idx, vec![r, c]).unwrap()
            }
            "take_rows" => {
                let k = self.rng.random_range(1..4);
                let rows: Vec<usize> = (0..k).map(|_| self.rng.random_range(0..r)).collect();
                self.g.take_rows(cur, &rows).unwrap()
            }
            "select" => {
                let other = self.leaf(&[r, c]);
                let mask: Vec<bool> = (0..r * c).map(|_| self.rng.random()).collect();
                self.g.select(mask, cur, other).unwrap()
            }
            other => panic!("unknown op {other}"),
        }
    }
}

/// Builds graph number `seed`: a random chain that always contains
/// `OPS[seed % 24]`, reduced to a scalar by a random linear functional.
fn build(seed: u64, overrides: Option<&[Tensor]>) -> (Builder<'_>, Var) {
    let mut b = Builder {
        g: Graph::new(),
        rng: rng::stream(seed, "random-graph"),
        leaves: Vec::new(),
        overrides,
        kink: f64::INFINITY,
        used: Vec::new(),
    };
    let r = b.rng.random_range(1..4);
    let c = b.rng.random_range(1..4);
    let mut cur = b.leaf(&[r, c]);
    let forced = OPS[(seed % OPS.len() as u64) as usize];
    let len = b.rng.random_range(3..7);
    let at = b.rng.random_range(0..len);
    for i in 0..len {
        let op = if i == at { forced } else { OPS[b.rng.random_range(0..OPS.len())] };
        cur = b.apply(op, cur);
    }
    let s = b.shape(cur);
    let n: usize = s.iter().product();
    let w = b.g.constant(Tensor::new(s, rng::normals(&mut b.rng, n)).unwrap());
    let prod = b.g.mul(cur, w).unwrap();
    let loss = b.g.sum(prod).unwrap();
    (b, loss)
}

pub struct GraphCheck {
    pub ops: Vec<&'static str>,
    /// Entries compared.
    pub entries: usize,
    /// Worst relative error among entries whose absolute error exceeds 1e-7.
    pub worst_rel: f64,
    pub pass: bool,
}

pub const FD_STEP: f64 = 1e-5;

/// Finite-difference check of every leaf entry of graph `seed`; `None` if the
/// graph has a kinked op within the FD reach of its kink (caller redraws).
pub fn check_random_graph(seed: u64) -> Option<GraphCheck> {
    let (b, loss) = build(seed, None);
    if b.kink < KINK_GAP {
        return None;
    }
    let grads = b.g.backward(loss).unwrap();
    let values: Vec<Tensor> = b.leaves.iter().map(|&v| b.g.value(v).clone()).collect();
    let analytic: Vec<Tensor> = b.leaves.iter().map(|&v| grads.wrt(v)).collect();
    let eval = |vals: &[Tensor]| {
        let (bb, l) = build(seed, Some(vals));
        bb.g.value(l).item()
    };
    let mut worst_rel: f64 = 0.0;
    let mut pass = true;
    let mut entries = 0;
    for (li, t) in values.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = values.clone();
            plus[li].data_mut()[j] += FD_STEP;
            let mut minus = values.clone();
            minus[li].data_mut()[j] -= FD_STEP;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let ana = analytic[li].data()[j];
            let abs = (num - ana).abs();
            entries += 1;
            if abs > 1e-7 {
                let rel = abs / num.abs().max(ana.abs());
                worst_rel = worst_rel.max(rel);
                if rel >= 1e-5 {
                    pass = false;
                }
            }
        }
    }
    Some(GraphCheck {
        ops: b.used.clone(),
        entries,
        worst_rel,
        pass,
    })
}

/// Runs graphs until `count` have been checked; returns the checks and the
/// set of ops covered.
pub fn check_graphs(count: usize) -> (Vec<GraphCheck>, Vec<&'static str>) {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < count {
        if let Some(c) = check_random_graph(seed) {
            out.push(c);
        }
        seed += 1;
    }
    let mut covered: Vec<&str> = out.iter().flat_map(|c| c.ops.iter().copied()).collect();
    covered.sort_unstable();
    covered.dedup();
    (out, covered)
}

/// Random projection instance: `dim <= 20`, `k <= 3` rows. Some instances
/// carry duplicated, parallel or zero rows.
pub fn qp_instance(r: &mut RunRng) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = r.random_range(1..=20);
    let k = r.random_range(0..=3);
    let v = rng::normals(r, dim);
    let mut b: Vec<Vec<f64>> = (0..k).map(|_| rng::normals(r, dim)).collect();
    if k >= 2 {
        match r.random_range(0..6) {
            0 => b[1] = b[0].clone(),
            1 => b[1] = b[0].iter().map(|x| 2.5 * x).collect(),
            2 => b[1] = vec![0.0; dim],
            _ => {}
        }
    }
    (v, b)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fraction of `draws` fresh (spec, z) pairs whose matrix has full rank.
/// Each draw samples Gaussian specs for the domains the matrix needs and a
/// point from one of those domains.
pub fn random_full_rank_fraction(n_s: usize, kind: MatrixKind, draws: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "ident-draws");
    let needed = kind.domains_needed(n_s);
    let mut full = 0;
    for _ in 0..draws {
        let specs: Vec<DomainSpec> = (0..needed)
            .map(|domain| DomainSpec {
                domain,
                changing: (0..n_s).map(|_| sample_dist(LatentFamily::Gaussian, Combine::Mixture, &mut r)).collect(),
            })
            .collect();
        let src = &specs[r.random_range(0..needed)];
        let z: Vec<f64> = src.changing.iter().map(|d| d.sample(&mut r)).collect();
        if build_matrix(&specs, kind, &z, 0).unwrap().full_rank() {
            full += 1;
        }
    }
    full as f64 / draws as f64
}
