//! Estimation networks: MLP encoder/decoder and per-domain spline flows.

pub mod checkpoint;
pub mod spline;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ndgrad::{GradError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng;
use spline::{RqSpline, SplineShape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Observation dimension.
    pub x_dim: usize,
    /// Latent dimension; the last `n_s` coordinates are the changing block.
    pub z_dim: usize,
    pub n_s: usize,
    pub hidden: usize,
    /// Number of activated hidden layers between the input and output layers.
    pub depth: usize,
    pub slope: f64,
    pub bins: usize,
    pub bound: f64,
    /// Encoder log-variance is clamped to `[-logvar_clamp, logvar_clamp]`.
    pub logvar_clamp: f64,
}

impl ModelConfig {
    pub fn new(x_dim: usize, z_dim: usize, n_s: usize) -> Self {
        Self {
            x_dim,
            z_dim,
            n_s,
            hidden: 32,
            depth: 4,
            slope: 0.2,
            bins: 8,
            bound: 5.0,
            logvar_clamp: 10.0,
        }
    }

    pub fn n_c(&self) -> usize {
        self.z_dim - self.n_s
    }

    pub fn spline_shape(&self) -> SplineShape {
        SplineShape {
            bins: self.bins,
            bound: self.bound,
        }
    }
}

/// Affine layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Kaiming-normal weights for a leaky-ReLU network, zero bias.
    fn new(params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, slope: f64, rng: &mut impl Rng) -> Self {
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let sd = gain / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| sd * rng::normal(rng)).collect();
        let weight = params.push(format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, w).expect("shape"));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, GradError> {
        let xw = g.matmul(x, vars[self.weight.0])?;
        g.add(xw, vars[self.bias.0])
    }
}

/// MLP laid out as: Linear, `depth` x (Linear + LeakyReLU), LeakyReLU, Linear.
#[derive(Clone, Debug, PartialEq)]
pub struct TableMlp {
    layers: Vec<Linear>,
    slope: f64,
}

impl TableMlp {
    fn new(params: &mut ParamStore, name: &str, input: usize, output: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut layers = vec![Linear::new(params, &format!("{name}.0"), input, cfg.hidden, cfg.slope, rng)];
        for i in 0..cfg.depth {
            layers.push(Linear::new(params, &format!("{name}.{}", i + 1), cfg.hidden, cfg.hidden, cfg.slope, rng));
        }
        layers.push(Linear::new(params, &format!("{name}.{}", cfg.depth + 1), cfg.hidden, output, cfg.slope, rng));
        Self {
            layers,
            slope: cfg.slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, GradError> {
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].forward(g, vars, x)?;
        for layer in &self.layers[1..last] {
            let a = layer.forward(g, vars, h)?;
            h = g.leaky_relu(a, self.slope)?;
        }
        h = g.leaky_relu(h, self.slope)?;
        self.layers[last].forward(g, vars, h)
    }

    pub fn output_layer(&self) -> Linear {
        *self.layers.last().expect("non-empty")
    }
}

/// Raw spline parameters of one domain, `[n_s, bins]` / `[n_s, bins - 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainFlow {
    pub widths: ParamId,
    pub heights: ParamId,
    pub derivs: ParamId,
}

/// Per-domain flows, allocated the first time a domain is seen.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SplineFlowBank {
    flows: Vec<(usize, DomainFlow)>,
}

impl SplineFlowBank {
    pub fn get(&self, domain: usize) -> Option<DomainFlow> {
        self.flows.iter().find(|(u, _)| *u == domain).map(|(_, f)| *f)
    }

    /// Domains in allocation order.
    pub fn domains(&self) -> Vec<usize> {
        self.flows.iter().map(|(u, _)| *u).collect()
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    fn allocate(&mut self, domain: usize, params: &mut ParamStore, cfg: &ModelConfig) -> DomainFlow {
        if let Some(f) = self.get(domain) {
            return f;
        }
        let (n_s, bins) = (cfg.n_s, cfg.bins);
        let flow = DomainFlow {
            widths: params.push(format!("flow.{domain}.widths"), Tensor::zeros(&[n_s, bins])),
            heights: params.push(format!("flow.{domain}.heights"), Tensor::zeros(&[n_s, bins])),
            derivs: params.push(
                format!("flow.{domain}.derivs"),
                Tensor::full(&[n_s, bins - 1], spline::identity_derivative_param()),
            ),
        };
        self.flows.push((domain, flow));
        flow
    }
}

/// Encoder, decoder and flow bank sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: TableMlp,
    decoder: TableMlp,
    flows: SplineFlowBank,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let encoder = TableMlp::new(&mut params, "encoder", config.x_dim, 2 * config.z_dim, &config, rng);
        let decoder = TableMlp::new(&mut params, "decoder", config.z_dim, config.x_dim, &config, rng);
        Self {
            config,
            params,
            encoder,
            decoder,
            flows: SplineFlowBank::default(),
        }
    }

    pub fn flows(&self) -> &SplineFlowBank {
        &self.flows
    }

    /// Ensures a flow exists for `domain`, returning its parameters.
    pub fn ensure_domain(&mut self, domain: usize) -> DomainFlow {
        let cfg = self.config;
        self.flows.allocate(domain, &mut self.params, &cfg)
    }

    /// Zeroes the encoder's output layer, making every posterior N(0, I).
    pub fn zero_encoder_head(&mut self) {
        let head = self.encoder.output_layer();
        for id in [head.weight, head.bias] {
            self.params.tensor_mut(id.0).data_mut().fill(0.0);
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.bind(g)
    }

    /// Posterior mean and clamped log-variance, each `[batch, z_dim]`.
    pub fn encode(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<(Var, Var), GradError> {
        let xd = g.shape(x).last().copied().unwrap_or(0);
        if xd != self.config.x_dim {
            return Err(GradError::Shape {
                op: "encode",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.config.x_dim],
            });
        }
        let out = self.encoder.forward(g, vars, x)?;
        let z = self.config.z_dim;
        let mean = g.slice_last(out, 0, z)?;
        let raw_lv = g.slice_last(out, z, z)?;
        let c = self.config.logvar_clamp;
        let logvar = g.clamp(raw_lv, -c, c)?;
        Ok((mean, logvar))
    }

    pub fn decode(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<Var, GradError> {
        self.decoder.forward(g, vars, z)
    }

    /// Applies domain `u`'s flow (the `z_s -> z~_s` direction) on a graph.
    pub fn flow_forward(&self, g: &mut Graph, vars: &[Var], domain: usize, zs: Var) -> Result<(Var, Var), GradError> {
        let flow = self.flows.get(domain).ok_or_else(|| GradError::Invalid {
            op: "flow_forward",
            msg: format!("no flow allocated for domain {domain}"),
        })?;
        spline::forward_graph(
            g,
            self.config.spline_shape(),
            zs,
            vars[flow.widths.0],
            vars[flow.heights.0],
            vars[flow.derivs.0],
        )
    }

    /// Per-dimension splines of a domain, for evaluation outside a graph.
    pub fn splines(&self, domain: usize) -> Option<Vec<RqSpline>> {
        let flow = self.flows.get(domain)?;
        let (w, h, d) = (
            self.params.get(flow.widths),
            self.params.get(flow.heights),
            self.params.get(flow.derivs),
        );
        Some(
            (0..self.config.n_s)
                .map(|i| RqSpline::from_raw(w.row(i), h.row(i), d.row(i), self.config.bound))
                .collect(),
        )
    }

    /// Encoder posterior means for a batch of observations.
    pub fn posterior_means(&self, x: &Tensor) -> Result<Tensor, GradError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let xv = g.constant(x.clone());
        let (mean, _) = self.encode(&mut g, &vars, xv)?;
        Ok(g.value(mean).clone())
    }
}

/// `mean + exp(logvar / 2) * eps` with fresh standard-normal `eps`.
pub fn reparameterize(g: &mut Graph, mean: Var, logvar: Var, rng: &mut impl Rng) -> Result<Var, GradError> {
    let shape = g.shape(mean).to_vec();
    let n: usize = shape.iter().product();
    let eps = g.constant(Tensor::new(shape, rng::normals(rng, n))?);
    reparameterize_with(g, mean, logvar, eps)
}

/// Reparameterization with caller-supplied noise.
pub fn reparameterize_with(g: &mut Graph, mean: Var, logvar: Var, eps: Var) -> Result<Var, GradError> {
    let half = g.scale(logvar, 0.5)?;
    let sd = g.exp(half)?;
    let noise = g.mul(sd, eps)?;
    g.add(mean, noise)
}
